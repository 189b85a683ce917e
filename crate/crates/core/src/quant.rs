//! Uniform integer and scaled minifloat quantizers.
//!
//! Integer quantization uses the affine pair `code = clamp(round(x / S) + Z)`,
//! `x_hat = S * (code - Z)`. Symmetric quantization fixes `Z = 0` and
//! `S = max|x| / (2^(b-1) - 1)`; asymmetric quantization uses
//! `S = (max - min) / (2^b - 1)` and `Z = round(-min / S)`. Minifloat
//! quantization uses `S = max|x| / max_finite` and nearest encoding of `x / S`.
//!
//! Every group occupies one contiguous run of the flattened tensor: the whole
//! tensor, one row (token), or `group_size` consecutive elements of a row.

use std::ops::Range;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::minifloat::NanPolicy;
use crate::scale_cast;
use crate::spec::{Granularity, NumberFormat, QuantSpec, ScaleConstraint};
use crate::tensor::Tensor;

/// Maps flattened element indices onto scale indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupLayout {
    rows: usize,
    cols: usize,
    granularity: Granularity,
}

impl GroupLayout {
    pub fn new(shape: &[usize], granularity: Granularity) -> Result<Self> {
        if let Granularity::PerToken = granularity {
            if shape.len() != 2 {
                return Err(Error::ShapeMismatch(format!(
                    "token-wise quantization needs a 2-D [tokens x hidden] matrix, got shape {shape:?}"
                )));
            }
        }
        if let Granularity::PerGroup(0) = granularity {
            return Err(Error::InvalidArgument("group size must be at least 1".into()));
        }
        let (rows, cols) = match shape.split_last() {
            None => (1, 1),
            Some((&c, lead)) => (lead.iter().product(), c),
        };
        Ok(Self {
            rows,
            cols,
            granularity,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn groups_per_row(&self) -> usize {
        match self.granularity {
            Granularity::PerTensor => 0,
            Granularity::PerToken => 1,
            Granularity::PerGroup(g) => self.cols.div_ceil(g),
        }
    }

    pub fn scale_count(&self) -> usize {
        match self.granularity {
            Granularity::PerTensor => 1,
            _ => self.rows * self.groups_per_row(),
        }
    }

    pub fn scale_index(&self, flat: usize) -> usize {
        match self.granularity {
            Granularity::PerTensor => 0,
            Granularity::PerToken => flat / self.cols,
            Granularity::PerGroup(g) => {
                let (r, c) = (flat / self.cols, flat % self.cols);
                r * self.groups_per_row() + c / g
            }
        }
    }

    /// Flat element range covered by group `g`.
    pub fn group_range(&self, g: usize) -> Range<usize> {
        match self.granularity {
            Granularity::PerTensor => 0..self.rows * self.cols,
            Granularity::PerToken => g * self.cols..(g + 1) * self.cols,
            Granularity::PerGroup(size) => {
                let gpr = self.groups_per_row();
                let (r, k) = (g / gpr, g % gpr);
                let start = k * size;
                let end = (start + size).min(self.cols);
                r * self.cols + start..r * self.cols + end
            }
        }
    }

    /// Number of consecutive scales forming one M2 compute group of
    /// `group_rows` rows.
    pub fn compute_group_len(&self, group_rows: usize) -> usize {
        match self.granularity {
            Granularity::PerTensor => 1,
            _ => group_rows * self.groups_per_row(),
        }
    }
}

/// Per-group affine parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupParams {
    pub scale: f64,
    pub zero: i32,
}

/// `max / qmax`, nudged by at most a few ulps to a fixed point of
/// `s -> (s * qmax) / qmax` so that re-quantizing the dequantized group
/// recovers the same scale.
pub(crate) fn fit_scale(max: f64, qmax: f64) -> f64 {
    let s0 = max / qmax;
    let fixed = |s: f64| (s * qmax) / qmax == s;
    if fixed(s0) {
        return s0;
    }
    let (mut up, mut down) = (s0, s0);
    for _ in 0..8 {
        up = up.next_up();
        if fixed(up) {
            return up;
        }
        down = down.next_down();
        if fixed(down) {
            return down;
        }
    }
    snap_scale(s0)
}

/// Rounds a positive scale to 40 significant bits so that `scale * code` is
/// exact for every code an asymmetric group can produce.
pub(crate) fn snap_scale(s: f64) -> f64 {
    const DROP: u32 = 13;
    let bits = s.to_bits();
    let rounded = (bits + (1u64 << (DROP - 1))) & !((1u64 << DROP) - 1);
    f64::from_bits(rounded)
}

pub(crate) fn int_range(bits: u8, symmetric: bool) -> (i32, i32) {
    if symmetric {
        (-(1 << (bits - 1)), (1 << (bits - 1)) - 1)
    } else {
        (0, (1 << bits) - 1)
    }
}

/// Fits scale and zero point to one group of values.
pub fn fit_params(values: &[f64], format: &NumberFormat) -> GroupParams {
    match *format {
        NumberFormat::Int { bits, symmetric: true } => {
            let max_abs = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let qmax = ((1 << (bits - 1)) - 1) as f64;
            let scale = if max_abs == 0.0 { 1.0 } else { fit_scale(max_abs, qmax) };
            GroupParams { scale, zero: 0 }
        }
        NumberFormat::Int { bits, symmetric: false } => {
            let (min, max) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
            let qmax = ((1 << bits) - 1) as f64;
            if values.is_empty() || (min == 0.0 && max == 0.0) {
                return GroupParams { scale: 1.0, zero: 0 };
            }
            if max == min {
                // Constant group: put the value on the code-range edge.
                let scale = snap_scale(min.abs() / qmax);
                let zero = (-min / scale).round() as i32;
                return GroupParams { scale, zero };
            }
            let range = max - min;
            let scale = snap_scale(range / qmax);
            // Zero point from the unsnapped ratio, rounding halves upward.
            let zero = ((-min * qmax) / range + 0.5).floor() as i32;
            GroupParams { scale, zero }
        }
        NumberFormat::Fp(f) => {
            let max_abs = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let scale = if max_abs == 0.0 {
                1.0
            } else {
                fit_scale(max_abs, f.max_finite())
            };
            GroupParams { scale, zero: 0 }
        }
    }
}

/// Encodes one value into a raw code of `format.bits()` bits.
/// Signed integer codes are stored two's-complement.
#[inline]
pub fn encode_value(x: f64, p: GroupParams, format: &NumberFormat) -> u8 {
    match *format {
        NumberFormat::Int { bits, symmetric } => {
            let (lo, hi) = int_range(bits, symmetric);
            let q = (x / p.scale).round_ties_even() + p.zero as f64;
            let c = q.clamp(lo as f64, hi as f64) as i32;
            (c & ((1 << bits) - 1)) as u8
        }
        NumberFormat::Fp(f) => f.encode_bits(x / p.scale),
    }
}

/// Integer value of a raw integer code (sign-extended when symmetric).
#[inline]
pub fn int_code_value(raw: u8, bits: u8, symmetric: bool) -> i32 {
    let raw = raw as i32;
    if symmetric && raw & (1 << (bits - 1)) != 0 {
        raw - (1 << bits)
    } else {
        raw
    }
}

#[inline]
pub fn decode_value(raw: u8, p: GroupParams, format: &NumberFormat) -> f64 {
    match *format {
        NumberFormat::Int { bits, symmetric } => p.scale * (int_code_value(raw, bits, symmetric) - p.zero) as f64,
        NumberFormat::Fp(f) => p.scale * f.decode_bits(raw),
    }
}

/// Round-to-nearest of a single value under fixed group parameters.
#[inline]
pub fn round_value(x: f64, p: GroupParams, format: &NumberFormat) -> f64 {
    decode_value(encode_value(x, p, format), p, format)
}

/// Packed codes with per-group scales, self-sufficient for dequantization.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    spec: QuantSpec,
    shape: Vec<usize>,
    codes: Vec<u8>,
    scales: Vec<f64>,
    zero_points: Option<Vec<i32>>,
}

impl QuantizedTensor {
    /// Assembles and validates a quantized tensor from stored parts.
    pub fn from_parts(
        spec: QuantSpec,
        shape: Vec<usize>,
        codes: Vec<u8>,
        scales: Vec<f64>,
        zero_points: Option<Vec<i32>>,
    ) -> Result<Self> {
        let q = Self {
            spec,
            shape,
            codes,
            scales,
            zero_points,
        };
        q.validate()?;
        Ok(q)
    }

    pub fn spec(&self) -> &QuantSpec {
        &self.spec
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn zero_points(&self) -> Option<&[i32]> {
        self.zero_points.as_deref()
    }

    pub fn layout(&self) -> GroupLayout {
        GroupLayout::new(&self.shape, self.spec.granularity).expect("validated on construction")
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn params(&self, group: usize) -> GroupParams {
        GroupParams {
            scale: self.scales[group],
            zero: self.zero_points.as_ref().map_or(0, |z| z[group]),
        }
    }

    /// Signed integer code of element `i` (INT family only).
    pub fn int_code(&self, i: usize) -> Option<i32> {
        match self.spec.format {
            NumberFormat::Int { bits, symmetric } => Some(int_code_value(self.codes[i], bits, symmetric)),
            NumberFormat::Fp(_) => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        let layout = GroupLayout::new(&self.shape, self.spec.granularity)?;
        let n = crate::tensor::checked_numel(&self.shape)?;
        if self.codes.len() != n {
            return Err(Error::Corrupted(format!(
                "{} codes for shape {:?}",
                self.codes.len(),
                self.shape
            )));
        }
        if self.scales.len() != layout.scale_count() {
            return Err(Error::Corrupted(format!(
                "group map expects {} scales, found {}",
                layout.scale_count(),
                self.scales.len()
            )));
        }
        if let Some(i) = self.scales.iter().position(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Corrupted(format!(
                "scale {i} is not positive and finite: {}",
                self.scales[i]
            )));
        }
        match (&self.zero_points, self.spec.format.is_asymmetric()) {
            (Some(z), true) if z.len() == self.scales.len() => {}
            (Some(z), true) => {
                return Err(Error::Corrupted(format!(
                    "{} zero points for {} scales",
                    z.len(),
                    self.scales.len()
                )))
            }
            (None, false) => {}
            (None, true) => return Err(Error::Corrupted("asymmetric tensor without zero points".into())),
            (Some(_), false) => return Err(Error::Corrupted("zero points on a zero-point-free format".into())),
        }
        let bits = self.spec.bits();
        let mask = ((1u16 << bits) - 1) as u8;
        if let Some(i) = self.codes.iter().position(|&c| c & !mask != 0) {
            return Err(Error::Corrupted(format!("code {i} exceeds {bits} bits")));
        }
        if let NumberFormat::Fp(f) = self.spec.format {
            if f.nan_policy() == NanPolicy::ReserveMaxCode {
                if let Some(i) = self.codes.iter().position(|&c| f.decode_bits(c).is_nan()) {
                    return Err(Error::Corrupted(format!("code {i} is the reserved NaN pattern")));
                }
            }
        }
        Ok(())
    }

    pub fn dequantize(&self) -> Result<Tensor> {
        self.validate()?;
        let layout = self.layout();
        let format = self.spec.format;
        let mut out = vec![0.0; self.codes.len()];
        for g in 0..layout.scale_count() {
            let p = self.params(g);
            let range = layout.group_range(g);
            for (o, &c) in out[range.clone()].iter_mut().zip(&self.codes[range]) {
                *o = decode_value(c, p, &format);
            }
        }
        Tensor::new(self.shape.clone(), out)
    }
}

pub fn dequantize(q: &QuantizedTensor) -> Result<Tensor> {
    q.dequantize()
}

/// Quantizes with round-to-nearest under any spec.
pub fn quantize(tensor: &Tensor, spec: &QuantSpec) -> Result<QuantizedTensor> {
    spec.validate()?;
    tensor.check_finite()?;
    let layout = GroupLayout::new(tensor.shape(), spec.granularity)?;
    let data = tensor.data();
    let params: Vec<GroupParams> = (0..layout.scale_count())
        .into_par_iter()
        .map(|g| fit_params(&data[layout.group_range(g)], &spec.format))
        .collect();
    let params = apply_constraint(&layout, spec.scale_constraint, params)?;
    quantize_with_params(tensor, spec, &params)
}

/// Replaces scales by their power-of-two constrained versions.
pub(crate) fn apply_constraint(
    layout: &GroupLayout,
    constraint: ScaleConstraint,
    params: Vec<GroupParams>,
) -> Result<Vec<GroupParams>> {
    let scales: Vec<f64> = params.iter().map(|p| p.scale).collect();
    let constrained = match constraint {
        ScaleConstraint::None => return Ok(params),
        ScaleConstraint::M1 => scale_cast::constrain_m1(&scales)?,
        ScaleConstraint::M2 { group_rows } => scale_cast::constrain_m2(&scales, layout.compute_group_len(group_rows))?,
    };
    Ok(params
        .iter()
        .zip(constrained.constrained())
        .map(|(p, &s)| GroupParams { scale: s, zero: p.zero })
        .collect())
}

/// Encodes a tensor with externally supplied per-group parameters.
pub fn quantize_with_params(tensor: &Tensor, spec: &QuantSpec, params: &[GroupParams]) -> Result<QuantizedTensor> {
    tensor.check_finite()?;
    let layout = GroupLayout::new(tensor.shape(), spec.granularity)?;
    if params.len() != layout.scale_count() {
        return Err(Error::ShapeMismatch(format!(
            "{} group parameters for {} groups",
            params.len(),
            layout.scale_count()
        )));
    }
    let data = tensor.data();
    let format = spec.format;
    let codes: Vec<u8> = (0..layout.scale_count())
        .into_par_iter()
        .flat_map_iter(|g| {
            let p = params[g];
            data[layout.group_range(g)]
                .iter()
                .map(move |&x| encode_value(x, p, &format))
        })
        .collect();
    let zero_points = spec
        .format
        .is_asymmetric()
        .then(|| params.iter().map(|p| p.zero).collect());
    QuantizedTensor::from_parts(
        *spec,
        tensor.shape().to_vec(),
        codes,
        params.iter().map(|p| p.scale).collect(),
        zero_points,
    )
}

pub fn quantize_int(tensor: &Tensor, spec: &QuantSpec) -> Result<QuantizedTensor> {
    match spec.format {
        NumberFormat::Int { .. } => quantize(tensor, spec),
        NumberFormat::Fp(_) => Err(Error::spec(spec.to_string(), "expected an integer spec")),
    }
}

pub fn quantize_fp(tensor: &Tensor, spec: &QuantSpec) -> Result<QuantizedTensor> {
    match spec.format {
        NumberFormat::Fp(_) => quantize(tensor, spec),
        NumberFormat::Int { .. } => Err(Error::spec(spec.to_string(), "expected a minifloat spec")),
    }
}

/// One scale per token row of a `[tokens x hidden]` activation matrix.
pub fn quantize_activations_tokenwise(acts: &Tensor, spec: &QuantSpec) -> Result<QuantizedTensor> {
    if acts.ndim() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "activations must be 2-D, got shape {:?}",
            acts.shape()
        )));
    }
    if spec.granularity != Granularity::PerToken {
        return Err(Error::spec(
            spec.to_string(),
            "token-wise quantization needs `token` granularity",
        ));
    }
    quantize(acts, spec)
}
