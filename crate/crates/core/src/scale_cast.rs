//! Power-of-two scale constraints for FP4 weights and the FP4 to FP8 cast.
//!
//! * M1 rounds every scale up to a power of two: `S' = 2^ceil(log2 S)`.
//! * M2 keeps the maximum `S_max` of each compute group and snaps the other
//!   scales down so that `S_max / S'` is a power of two:
//!   `S' = S_max / 2^ceil(log2(S_max / S))`.
//!
//! With either constraint, moving an FP4 value onto an FP8 grid is a pure
//! exponent shift, which [`cast_group_to_fp8`] performs and checks.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::minifloat::{ldexp, MiniFloatFormat};
use crate::quant::{GroupLayout, QuantizedTensor};
use crate::spec::{NumberFormat, QuantSpec, ScaleConstraint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ConstraintMethod {
    M1,
    M2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstrainedScales {
    original: Vec<f64>,
    constrained: Vec<f64>,
    method: ConstraintMethod,
    /// Scales per M2 compute group; 1 for M1.
    group_len: usize,
    shared_max: Vec<f64>,
}

impl ConstrainedScales {
    pub fn original(&self) -> &[f64] {
        &self.original
    }

    pub fn constrained(&self) -> &[f64] {
        &self.constrained
    }

    pub fn method(&self) -> ConstraintMethod {
        self.method
    }

    pub fn group_len(&self) -> usize {
        self.group_len
    }

    /// `S_max` of each M2 compute group (empty for M1).
    pub fn shared_max(&self) -> &[f64] {
        &self.shared_max
    }

    /// Bit-level check of the power-of-two property and the bracketing
    /// inequalities for every scale.
    pub fn certify(&self) -> bool {
        match self.method {
            ConstraintMethod::M1 => self
                .original
                .iter()
                .zip(&self.constrained)
                .all(|(&s, &c)| is_power_of_two(c) && s <= c && c < 2.0 * s),
            ConstraintMethod::M2 => self
                .original
                .chunks(self.group_len)
                .zip(self.constrained.chunks(self.group_len))
                .zip(&self.shared_max)
                .all(|((orig, cons), &smax)| {
                    let max_kept = orig.iter().zip(cons).all(|(&s, &c)| s != smax || c == smax);
                    max_kept
                        && orig
                            .iter()
                            .zip(cons)
                            .all(|(&s, &c)| is_power_of_two(smax / c) && s / 2.0 < c && c <= s)
                }),
        }
    }
}

/// True when `x` is a positive normal power of two: the significand bits
/// are all zero.
pub fn is_power_of_two(x: f64) -> bool {
    x.is_normal() && x > 0.0 && x.to_bits() & ((1u64 << 52) - 1) == 0
}

/// `2^ceil(log2 s)` computed from the bit pattern.
fn ceil_pow2(s: f64) -> f64 {
    let (mant, exp) = frexp(s);
    // s = mant * 2^exp with mant in [0.5, 1)
    if mant == 0.5 {
        s
    } else {
        ldexp(1.0, exp)
    }
}

/// Decomposes a positive finite `x` into `mant * 2^exp`, `mant` in `[0.5, 1)`.
pub fn frexp(x: f64) -> (f64, i32) {
    if x == 0.0 || !x.is_finite() {
        return (x, 0);
    }
    if !x.is_normal() {
        let (m, e) = frexp(ldexp(x, 64));
        return (m, e - 64);
    }
    let bits = x.to_bits();
    let exp = ((bits >> 52) & 0x7ff) as i32 - 1022;
    let mant = f64::from_bits((bits & !(0x7ffu64 << 52)) | (1022u64 << 52));
    (mant, exp)
}

fn check_scales(scales: &[f64]) -> Result<()> {
    if scales.is_empty() {
        return Err(Error::InvalidArgument("empty scale group".into()));
    }
    if let Some(i) = scales.iter().position(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "scale {i} must be positive and finite, got {}",
            scales[i]
        )));
    }
    Ok(())
}

pub fn constrain_m1(scales: &[f64]) -> Result<ConstrainedScales> {
    check_scales(scales)?;
    Ok(ConstrainedScales {
        original: scales.to_vec(),
        constrained: scales.iter().map(|&s| ceil_pow2(s)).collect(),
        method: ConstraintMethod::M1,
        group_len: 1,
        shared_max: Vec::new(),
    })
}

/// Smallest `k >= 0` with `smax * 2^-k <= s`, using exact power-of-two scaling.
fn m2_shift(smax: f64, s: f64) -> i32 {
    let mut k = (smax / s).log2().ceil().max(0.0) as i32;
    while ldexp(smax, -k) > s {
        k += 1;
    }
    while k > 0 && ldexp(smax, -(k - 1)) <= s {
        k -= 1;
    }
    k
}

/// M2 over consecutive compute groups of `group_len` scales (last may be ragged).
pub fn constrain_m2(scales: &[f64], group_len: usize) -> Result<ConstrainedScales> {
    check_scales(scales)?;
    if group_len == 0 {
        return Err(Error::InvalidArgument(
            "M2 compute group must hold at least one scale".into(),
        ));
    }
    let mut constrained = Vec::with_capacity(scales.len());
    let mut shared_max = Vec::new();
    for chunk in scales.chunks(group_len) {
        let smax = chunk.iter().copied().fold(f64::MIN, f64::max);
        shared_max.push(smax);
        constrained.extend(chunk.iter().map(|&s| ldexp(smax, -m2_shift(smax, s))));
    }
    Ok(ConstrainedScales {
        original: scales.to_vec(),
        constrained,
        method: ConstraintMethod::M2,
        group_len,
        shared_max,
    })
}

/// Applies `constraint` to a flat scale vector laid out by `layout`.
pub fn constrain(
    scales: &[f64],
    layout: &GroupLayout,
    constraint: ScaleConstraint,
) -> Result<Option<ConstrainedScales>> {
    match constraint {
        ScaleConstraint::None => Ok(None),
        ScaleConstraint::M1 => constrain_m1(scales).map(Some),
        ScaleConstraint::M2 { group_rows } => constrain_m2(scales, layout.compute_group_len(group_rows)).map(Some),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CastReport {
    pub elements: usize,
    /// Values beyond the FP8 range, clamped to its max finite magnitude.
    pub saturated: usize,
    /// Nonzero values below the FP8 resolution that were rounded.
    pub underflowed: usize,
}

impl CastReport {
    pub fn out_of_range(&self) -> usize {
        self.saturated + self.underflowed
    }

    pub fn is_exact(&self) -> bool {
        self.out_of_range() == 0
    }
}

/// Re-encodes M1/M2-constrained FP4 weights into E5M2 by exponent shifts.
///
/// M2 output shares `S_max` as the scale of every group in a compute group and
/// stores `v * S_i / S_max`; M1 folds the power-of-two scale into the value
/// and stores `v * S_i` with unit scale.
pub fn cast_group_to_fp8(q: &QuantizedTensor) -> Result<(QuantizedTensor, CastReport)> {
    let spec = *q.spec();
    let mismatch = |why: &str| Error::spec(spec.to_string(), format!("cannot cast to FP8: {why}"));
    let fp4 = match spec.format {
        NumberFormat::Fp(f) if f.total_bits() == 4 => f,
        _ => return Err(mismatch("input must be FP4")),
    };
    let layout = q.layout();
    let scales = q.scales();
    let (shift, out_scales): (Vec<f64>, Vec<f64>) = match spec.scale_constraint {
        ScaleConstraint::None => return Err(mismatch("scales are not M1/M2 constrained")),
        ScaleConstraint::M1 => {
            if !scales.iter().all(|&s| is_power_of_two(s)) {
                return Err(mismatch("M1 scales must be powers of two"));
            }
            (scales.to_vec(), vec![1.0; scales.len()])
        }
        ScaleConstraint::M2 { group_rows } => {
            let len = layout.compute_group_len(group_rows);
            let mut shift = Vec::with_capacity(scales.len());
            let mut out = Vec::with_capacity(scales.len());
            for chunk in scales.chunks(len) {
                let smax = chunk.iter().copied().fold(f64::MIN, f64::max);
                for &s in chunk {
                    let ratio = s / smax;
                    if !is_power_of_two(ratio) {
                        return Err(mismatch("M2 scale ratios must be powers of two"));
                    }
                    shift.push(ratio);
                    out.push(smax);
                }
            }
            (shift, out)
        }
    };

    let e5m2 = MiniFloatFormat::E5M2;
    let max8 = e5m2.max_finite();
    let mut codes = Vec::with_capacity(q.len());
    let mut report = CastReport {
        elements: q.len(),
        saturated: 0,
        underflowed: 0,
    };
    for (g, &k) in shift.iter().enumerate() {
        for &c in &q.codes()[layout.group_range(g)] {
            let v = fp4.decode_bits(c) * k;
            let code = e5m2.encode_bits(v);
            if e5m2.decode_bits(code) != v {
                if v.abs() > max8 {
                    report.saturated += 1;
                } else {
                    report.underflowed += 1;
                }
            }
            codes.push(code);
        }
    }
    let out_spec = QuantSpec::new(NumberFormat::Fp(e5m2), spec.granularity, spec.scale_constraint)?;
    let tensor = QuantizedTensor::from_parts(out_spec, q.shape().to_vec(), codes, out_scales, None)?;
    Ok((tensor, report))
}
