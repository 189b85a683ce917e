//! Second-order column-wise weight quantization.
//!
//! The layer objective is `||(W - W_hat) X^T||_F^2` over calibration inputs
//! `X`. Its Hessian with respect to one output row is `H = 2 X^T X`. Columns
//! are quantized left to right; after each column the rounding error is
//! spread over the not-yet-quantized columns through the upper Cholesky
//! factor `U` of `(H + lambda I)^-1`:
//!
//! ```text
//! err   = (w_i - q_i) / U[i,i]
//! w_j  -= err * U[i,j]        for j > i
//! ```
//!
//! Updates inside a block of columns are applied eagerly; updates to columns
//! past the block are batched and applied once the block is finished.
//! Rows never interact, so they are solved in parallel.

use std::path::PathBuf;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::quant::{
    apply_constraint, decode_value, encode_value, fit_params, quantize, GroupLayout, GroupParams, QuantizedTensor,
};
use crate::spec::{Granularity, NumberFormat, QuantSpec};
use crate::tensor::Tensor;

pub const DEFAULT_DAMPING: f64 = 0.01;
pub const DEFAULT_BLOCK_SIZE: usize = 128;

/// Pivots below this fraction of the largest diagonal entry count as zero.
const PIVOT_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub enum CalibrationSource {
    Synthetic { kind: String, seed: u64 },
    File(PathBuf),
    Memory,
}

/// Layer-input activations, one sample per row.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    samples: Tensor,
    source: CalibrationSource,
}

impl CalibrationSet {
    pub fn new(samples: Tensor) -> Result<Self> {
        if samples.ndim() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "calibration samples must be a 2-D [samples x features] matrix, got shape {:?}",
                samples.shape()
            )));
        }
        if samples.shape()[0] == 0 || samples.shape()[1] == 0 {
            return Err(Error::InvalidArgument("calibration set is empty".into()));
        }
        samples.check_finite()?;
        Ok(Self {
            samples,
            source: CalibrationSource::Memory,
        })
    }

    pub fn with_source(mut self, source: CalibrationSource) -> Self {
        self.source = source;
        self
    }

    pub fn samples(&self) -> &Tensor {
        &self.samples
    }

    pub fn source(&self) -> &CalibrationSource {
        &self.source
    }

    pub fn n_samples(&self) -> usize {
        self.samples.shape()[0]
    }

    pub fn in_features(&self) -> usize {
        self.samples.shape()[1]
    }
}

/// Hessian of the layer objective plus the factor used by the solver.
#[derive(Debug, Clone)]
pub struct HessianState {
    h: DMatrix<f64>,
    damping: f64,
    dead: Vec<bool>,
    /// Upper Cholesky factor of `(H + lambda I)^-1`, row-major.
    u: Vec<f64>,
}

impl HessianState {
    /// Factorizes an explicit Hessian. Columns with a zero diagonal are
    /// marked dead and given a unit diagonal before damping.
    pub fn from_hessian(h: DMatrix<f64>, damping_fraction: f64) -> Result<Self> {
        let n = h.nrows();
        if n == 0 || h.ncols() != n {
            return Err(Error::ShapeMismatch(format!(
                "Hessian must be square and nonempty, got {}x{}",
                h.nrows(),
                h.ncols()
            )));
        }
        if !(damping_fraction.is_finite() && damping_fraction >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "damping fraction must be finite and nonnegative, got {damping_fraction}"
            )));
        }
        if let Some(i) = h.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index: i });
        }
        let dead: Vec<bool> = (0..n).map(|i| h[(i, i)] == 0.0).collect();
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                a[i * n + j] = 0.5 * (h[(i, j)] + h[(j, i)]);
            }
        }
        for i in (0..n).filter(|&i| dead[i]) {
            a[i * n + i] = 1.0;
        }
        let damping = damping_fraction * (0..n).map(|i| a[i * n + i]).sum::<f64>() / n as f64;
        for i in 0..n {
            a[i * n + i] += damping;
        }
        let l = cholesky_lower(&a, n)?;
        let hinv = inverse_from_cholesky(&l, n);
        let l2 = cholesky_lower(&hinv, n)?;
        let mut u = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                u[i * n + j] = l2[j * n + i];
            }
        }
        Ok(Self { h, damping, dead, u })
    }

    pub fn dim(&self) -> usize {
        self.h.nrows()
    }

    /// `2 X^T X` as accumulated, before dead-column repair and damping.
    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }

    /// Absolute damping `lambda` added to the diagonal.
    pub fn damping(&self) -> f64 {
        self.damping
    }

    pub fn dead_columns(&self) -> &[bool] {
        &self.dead
    }

    /// Upper-triangular Cholesky factor of `(H + lambda I)^-1`.
    pub fn hinv_chol(&self) -> DMatrix<f64> {
        let n = self.dim();
        DMatrix::from_row_slice(n, n, &self.u)
    }
}

/// `H = 2 X^T X` with `lambda = damping_fraction * mean(diag H)`.
pub fn build_hessian(calib: &CalibrationSet, damping_fraction: f64) -> Result<HessianState> {
    let x = calib.samples().to_dmatrix();
    let mut h = x.transpose() * &x;
    h *= 2.0;
    HessianState::from_hessian(h, damping_fraction)
}

/// In-place lower Cholesky of a row-major SPD matrix.
fn cholesky_lower(a: &[f64], n: usize) -> Result<Vec<f64>> {
    let max_diag = (0..n).map(|i| a[i * n + i]).fold(0.0f64, f64::max);
    let tol = PIVOT_TOLERANCE * max_diag;
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let row_j = j * n;
        let d = a[row_j + j] - dot(&l[row_j..row_j + j], &l[row_j..row_j + j]);
        // NaN pivots fail here too.
        if d.is_nan() || d <= tol {
            return Err(Error::Factorization { pivot: j });
        }
        let djj = d.sqrt();
        l[row_j + j] = djj;
        for i in j + 1..n {
            let row_i = i * n;
            let s = a[row_i + j] - dot(&l[row_i..row_i + j], &l[row_j..row_j + j]);
            l[row_i + j] = s / djj;
        }
    }
    Ok(l)
}

/// `(L L^T)^-1 = L^-T L^-1` for lower-triangular row-major `L`.
fn inverse_from_cholesky(l: &[f64], n: usize) -> Vec<f64> {
    // Column k of L^-1 by forward substitution; stored row-major as linv[i][k].
    let mut linv = vec![0.0; n * n];
    for k in 0..n {
        linv[k * n + k] = 1.0 / l[k * n + k];
        for i in k + 1..n {
            let mut s = 0.0;
            for t in k..i {
                s += l[i * n + t] * linv[t * n + k];
            }
            linv[i * n + k] = -s / l[i * n + i];
        }
    }
    let linv = DMatrix::from_row_slice(n, n, &linv);
    let inv = linv.transpose() * &linv;
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = 0.5 * (inv[(i, j)] + inv[(j, i)]);
        }
    }
    out
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Result of a solve, with the unconstrained first pass kept when the recipe
/// carries a scale constraint.
#[derive(Debug, Clone)]
pub struct GptqOutput {
    pub quantized: QuantizedTensor,
    pub unconstrained: Option<QuantizedTensor>,
}

/// Blocked solver. `block_size` columns are processed with eager updates and
/// the trailing columns are updated once per block.
pub fn gptq_quantize(w: &Tensor, hess: &HessianState, spec: &QuantSpec, block_size: usize) -> Result<QuantizedTensor> {
    gptq_quantize_detailed(w, hess, spec, block_size).map(|o| o.quantized)
}

/// Column-at-a-time solver with every update applied immediately. Slow, and
/// kept as the reference the blocked solver is checked against.
pub fn gptq_quantize_sequential(w: &Tensor, hess: &HessianState, spec: &QuantSpec) -> Result<QuantizedTensor> {
    solve(w, hess, spec, Mode::Sequential).map(|o| o.quantized)
}

pub fn gptq_quantize_detailed(
    w: &Tensor,
    hess: &HessianState,
    spec: &QuantSpec,
    block_size: usize,
) -> Result<GptqOutput> {
    if block_size == 0 {
        return Err(Error::InvalidArgument("block size must be at least 1".into()));
    }
    solve(w, hess, spec, Mode::Blocked(block_size))
}

/// Round-to-nearest control arm; identical to [`quantize`].
pub fn rtn_baseline(w: &Tensor, spec: &QuantSpec) -> Result<QuantizedTensor> {
    quantize(w, spec)
}

#[derive(Debug, Clone, Copy)]
enum Mode {
    Blocked(usize),
    Sequential,
}

fn solve(w: &Tensor, hess: &HessianState, spec: &QuantSpec, mode: Mode) -> Result<GptqOutput> {
    spec.validate()?;
    w.check_finite()?;
    if w.ndim() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "weights must be a 2-D [out x in] matrix, got shape {:?}",
            w.shape()
        )));
    }
    let cols = w.shape()[1];
    if cols != hess.dim() {
        return Err(Error::ShapeMismatch(format!(
            "weights have {cols} input features but the Hessian is {0}x{0}",
            hess.dim()
        )));
    }
    let layout = GroupLayout::new(w.shape(), spec.granularity)?;
    let first = solve_pass(w, hess, spec, &layout, mode, None)?;
    if spec.scale_constraint.is_none() {
        return Ok(GptqOutput {
            quantized: first,
            unconstrained: None,
        });
    }
    // Pin the constrained grid that round-to-nearest would use, then solve
    // on it so that the error feedback sees the final grid. Scales taken
    // from the free solve instead fit a grid the constraint then clips
    // harder, which loses to round-to-nearest when outliers set `S_max`.
    let data = w.data();
    let params: Vec<GroupParams> = (0..layout.scale_count())
        .map(|g| fit_params(&data[layout.group_range(g)], &spec.format))
        .collect();
    let pinned = apply_constraint(&layout, spec.scale_constraint, params)?;
    let second = solve_pass(w, hess, spec, &layout, mode, Some(&pinned))?;
    let mut free_spec = *spec;
    free_spec.scale_constraint = Default::default();
    let unconstrained = QuantizedTensor::from_parts(
        free_spec,
        first.shape().to_vec(),
        first.codes().to_vec(),
        first.scales().to_vec(),
        first.zero_points().map(|z| z.to_vec()),
    )?;
    Ok(GptqOutput {
        quantized: second,
        unconstrained: Some(unconstrained),
    })
}

fn solve_pass(
    w: &Tensor,
    hess: &HessianState,
    spec: &QuantSpec,
    layout: &GroupLayout,
    mode: Mode,
    pinned: Option<&[GroupParams]>,
) -> Result<QuantizedTensor> {
    let cols = layout.cols();
    let format = spec.format;
    // Per-tensor scales see the whole matrix, so they are fitted up front.
    let (group_size, global) = match spec.granularity {
        Granularity::PerGroup(g) => (g, None),
        Granularity::PerToken => (cols, None),
        Granularity::PerTensor => {
            let p = pinned.map_or_else(|| fit_params(w.data(), &format), |p| p[0]);
            (cols, Some(p))
        }
    };
    let gpr = cols.div_ceil(group_size);
    let solver = RowSolver {
        u: &hess.u,
        dead: &hess.dead,
        n: cols,
        group_size,
        format,
        mode,
    };
    let results: Vec<(Vec<u8>, Vec<GroupParams>)> = w
        .data()
        .par_chunks(cols)
        .enumerate()
        .map(|(r, row)| {
            let fixed: Option<Vec<GroupParams>> = match (global, pinned) {
                (Some(p), _) => Some(vec![p]),
                (None, Some(p)) => Some(p[r * gpr..(r + 1) * gpr].to_vec()),
                (None, None) => None,
            };
            solver.solve_row(row, fixed)
        })
        .collect();
    let mut codes = Vec::with_capacity(w.len());
    let mut params = Vec::with_capacity(layout.scale_count());
    for (c, p) in results {
        codes.extend(c);
        params.extend(p);
    }
    if global.is_some() {
        params.truncate(1);
    }
    let zero_points = format.is_asymmetric().then(|| params.iter().map(|p| p.zero).collect());
    QuantizedTensor::from_parts(
        *spec,
        w.shape().to_vec(),
        codes,
        params.iter().map(|p| p.scale).collect(),
        zero_points,
    )
}

struct RowSolver<'a> {
    u: &'a [f64],
    dead: &'a [bool],
    n: usize,
    group_size: usize,
    format: NumberFormat,
    mode: Mode,
}

impl RowSolver<'_> {
    fn solve_row(&self, row: &[f64], fixed: Option<Vec<GroupParams>>) -> (Vec<u8>, Vec<GroupParams>) {
        let n = self.n;
        let u = self.u;
        let mut w = row.to_vec();
        let mut codes = vec![0u8; n];
        let fitting = fixed.is_none();
        let mut params = fixed.unwrap_or_default();
        let block = match self.mode {
            Mode::Blocked(b) => b.min(n),
            Mode::Sequential => n,
        };
        let mut errs = vec![0.0; block];
        let mut group_vals = Vec::with_capacity(self.group_size);
        for b0 in (0..n).step_by(block) {
            let b1 = (b0 + block).min(n);
            for i in b0..b1 {
                if fitting && i % self.group_size == 0 {
                    // Fit from the current weights; columns past the block
                    // still owe the updates from this block's earlier columns.
                    let end = (i + self.group_size).min(n);
                    group_vals.clear();
                    group_vals.extend_from_slice(&w[i..end.min(b1)]);
                    for j in b1.max(i)..end {
                        let pending: f64 = (b0..i).map(|t| errs[t - b0] * u[t * n + j]).sum();
                        group_vals.push(w[j] - pending);
                    }
                    params.push(fit_params(&group_vals, &self.format));
                }
                let p = params[i / self.group_size];
                let code = encode_value(w[i], p, &self.format);
                codes[i] = code;
                let err = if self.dead[i] {
                    0.0
                } else {
                    (w[i] - decode_value(code, p, &self.format)) / u[i * n + i]
                };
                errs[i - b0] = err;
                if err != 0.0 {
                    let urow = &u[i * n..(i + 1) * n];
                    for j in i + 1..b1 {
                        w[j] -= err * urow[j];
                    }
                }
            }
            if b1 < n {
                for t in b0..b1 {
                    let err = errs[t - b0];
                    if err == 0.0 {
                        continue;
                    }
                    let urow = &u[t * n..(t + 1) * n];
                    for j in b1..n {
                        w[j] -= err * urow[j];
                    }
                }
            }
        }
        (codes, params)
    }
}

/// `||(W - W_hat) X^T||_F` over the calibration samples.
pub fn proxy_loss(w: &Tensor, w_hat: &Tensor, calib: &CalibrationSet) -> Result<f64> {
    w.ensure_same_shape(w_hat)?;
    let (_, cols) = w.matrix_dims();
    if cols != calib.in_features() {
        return Err(Error::ShapeMismatch(format!(
            "weights have {cols} input features, calibration has {}",
            calib.in_features()
        )));
    }
    let d = w.to_dmatrix() - w_hat.to_dmatrix();
    let x = calib.samples().to_dmatrix();
    Ok((d * x.transpose()).norm())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect();
        Tensor::from_rows(rows, cols, data).unwrap()
    }

    fn calib(rows: usize, cols: usize, seed: u64) -> CalibrationSet {
        CalibrationSet::new(gaussian(rows, cols, seed)).unwrap()
    }

    #[test]
    fn identity_rows_give_diagonal_factor() {
        let mut eye = vec![0.0; 16];
        for i in 0..4 {
            eye[i * 4 + i] = 1.0;
        }
        let c = CalibrationSet::new(Tensor::from_rows(4, 4, eye).unwrap()).unwrap();
        let h = build_hessian(&c, 0.01).unwrap();
        assert_eq!(h.h(), &(DMatrix::identity(4, 4) * 2.0));
        assert!((h.damping() - 0.02).abs() < 1e-15);
        let u = h.hinv_chol();
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    assert_eq!(u[(i, j)], 0.0);
                }
            }
            assert!((u[(i, i)] - (1.0 / 2.02f64).sqrt()).abs() < 1e-15);
        }
    }

    #[test]
    fn hessian_matches_loop_product() {
        let c = calib(32, 64, 3);
        let h = build_hessian(&c, 0.01).unwrap();
        let x = c.samples().data();
        for i in 0..64 {
            for j in 0..64 {
                let direct: f64 = 2.0 * (0..32).map(|s| x[s * 64 + i] * x[s * 64 + j]).sum::<f64>();
                assert!((h.h()[(i, j)] - direct).abs() <= 1e-10 * direct.abs().max(1.0));
            }
        }
    }

    #[test]
    fn factor_reproduces_damped_inverse() {
        let c = calib(40, 24, 5);
        let h = build_hessian(&c, 0.01).unwrap();
        let u = h.hinv_chol();
        let damped = h.h() + DMatrix::identity(24, 24) * h.damping();
        // (U^T U) (H + lambda I) = I
        let prod = u.transpose() * &u * damped;
        let err = (prod - DMatrix::identity(24, 24)).amax();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn rank_deficient_needs_damping() {
        let c = calib(4, 8, 9);
        assert!(build_hessian(&c, 0.01).is_ok());
        assert!(matches!(build_hessian(&c, 0.0), Err(Error::Factorization { .. })));
    }

    #[test]
    fn identity_hessian_degenerates_to_rtn() {
        let w = gaussian(16, 64, 1);
        let h = HessianState::from_hessian(DMatrix::identity(64, 64) * 3.0, 0.01).unwrap();
        for s in [
            "int4:sym:group32",
            "int4:asym:group16",
            "fp4:e2m1:group32",
            "fp8:e4m3:token",
            "int8:sym:tensor",
            "fp4:e2m1:group32:m2",
        ] {
            let spec: QuantSpec = s.parse().unwrap();
            let g = gptq_quantize(&w, &h, &spec, 8).unwrap();
            let r = rtn_baseline(&w, &spec).unwrap();
            assert_eq!(g, r, "{s}");
        }
    }

    #[test]
    fn on_grid_weights_are_fixed_points() {
        let spec: QuantSpec = "int4:sym:group16".parse().unwrap();
        let w = rtn_baseline(&gaussian(8, 48, 2), &spec).unwrap().dequantize().unwrap();
        let h = build_hessian(&calib(32, 48, 4), 0.01).unwrap();
        let q = gptq_quantize(&w, &h, &spec, 16).unwrap();
        assert_eq!(q.dequantize().unwrap(), w);
    }

    #[test]
    fn blocked_matches_sequential() {
        let w = gaussian(24, 72, 6);
        let h = build_hessian(&calib(48, 72, 7), 0.01).unwrap();
        for s in [
            "int4:sym:group32",
            "int4:asym:group20",
            "fp4:e2m1:group32",
            "fp8:e4m3:tensor",
        ] {
            let spec: QuantSpec = s.parse().unwrap();
            let seq = gptq_quantize_sequential(&w, &h, &spec).unwrap();
            for block in [1, 7, 16, 128] {
                let blk = gptq_quantize(&w, &h, &spec, block).unwrap();
                assert_eq!(blk.codes(), seq.codes(), "{s} block {block}");
                for (a, b) in blk.scales().iter().zip(seq.scales()) {
                    assert!((a - b).abs() <= 1e-12 * a.abs(), "{s} block {block}");
                }
            }
        }
    }

    #[test]
    fn beats_rtn_on_gaussian_layer() {
        let w = gaussian(64, 64, 11);
        let c = calib(32, 64, 12);
        let h = build_hessian(&c, 0.01).unwrap();
        let spec: QuantSpec = "int4:sym:group32".parse().unwrap();
        let g = gptq_quantize(&w, &h, &spec, 128).unwrap().dequantize().unwrap();
        let r = rtn_baseline(&w, &spec).unwrap().dequantize().unwrap();
        assert!(proxy_loss(&w, &g, &c).unwrap() < proxy_loss(&w, &r, &c).unwrap());
    }

    #[test]
    fn dead_columns_fall_back_to_rtn() {
        let mut x = gaussian(16, 8, 13).into_data();
        for r in 0..16 {
            x[r * 8 + 3] = 0.0;
        }
        let c = CalibrationSet::new(Tensor::from_rows(16, 8, x).unwrap()).unwrap();
        let h = build_hessian(&c, 0.01).unwrap();
        assert_eq!(h.dead_columns().iter().filter(|&&d| d).count(), 1);
        assert!(h.dead_columns()[3]);
        let w = gaussian(4, 8, 14);
        let spec: QuantSpec = "int8:sym:token".parse().unwrap();
        assert!(gptq_quantize(&w, &h, &spec, 4).is_ok());
    }

    #[test]
    fn constrained_solve_keeps_unconstrained_pass() {
        let w = gaussian(8, 64, 15);
        let h = build_hessian(&calib(32, 64, 16), 0.01).unwrap();
        let spec: QuantSpec = "fp4:e2m1:group16:m1".parse().unwrap();
        let out = gptq_quantize_detailed(&w, &h, &spec, 32).unwrap();
        assert!(out
            .quantized
            .scales()
            .iter()
            .all(|&s| crate::scale_cast::is_power_of_two(s)));
        assert!(out.unconstrained.unwrap().spec().scale_constraint.is_none());
    }

    #[test]
    fn rejects_bad_shapes() {
        let h = HessianState::from_hessian(DMatrix::identity(4, 4), 0.01).unwrap();
        let spec: QuantSpec = "int8:sym:token".parse().unwrap();
        assert!(gptq_quantize(&gaussian(2, 5, 0), &h, &spec, 2).is_err());
        assert!(gptq_quantize(&gaussian(2, 4, 0), &h, &spec, 0).is_err());
        assert!(HessianState::from_hessian(DMatrix::identity(4, 4), -1.0).is_err());
    }
}
