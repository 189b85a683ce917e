//! Low-rank compensation of weight quantization error.
//!
//! The error `E = W - dequantize(q)` is approximated by its rank-`r` SVD
//! truncation, split symmetrically as `left = U_r sqrt(S_r)` and
//! `right = sqrt(S_r) V_r^T`, and added back in working precision.

use nalgebra::{DMatrix, DVector, SVD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::quant::QuantizedTensor;
use crate::tensor::Tensor;

pub const DEFAULT_RANK: usize = 8;

const SVD_EPS: f64 = 1e-15;
const SVD_MAX_ITER: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SvdMethod {
    /// Full SVD of the dense error matrix.
    #[default]
    Dense,
    /// Gaussian range finder with oversampling and power iterations,
    /// meant for matrices too large for a dense SVD.
    Randomized {
        oversample: usize,
        power_iters: usize,
        seed: u64,
    },
}

impl SvdMethod {
    pub fn randomized(seed: u64) -> Self {
        SvdMethod::Randomized {
            oversample: 10,
            power_iters: 2,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LorcFactors {
    left: Tensor,
    right: Tensor,
    rank: usize,
    captured_energy: f64,
}

impl LorcFactors {
    /// Assembles factors read back from storage.
    pub fn from_parts(left: Tensor, right: Tensor, captured_energy: f64) -> Result<Self> {
        if left.ndim() != 2 || right.ndim() != 2 || left.shape()[1] != right.shape()[0] {
            return Err(Error::ShapeMismatch(format!(
                "factors {:?} and {:?} do not chain",
                left.shape(),
                right.shape()
            )));
        }
        if !(0.0..=1.0).contains(&captured_energy) {
            return Err(Error::InvalidArgument(format!(
                "captured energy {captured_energy} outside [0, 1]"
            )));
        }
        left.check_finite()?;
        right.check_finite()?;
        let rank = left.shape()[1];
        Ok(Self {
            left,
            right,
            rank,
            captured_energy,
        })
    }

    /// All-zero factors of the given rank.
    pub fn zeros(out: usize, inp: usize, rank: usize) -> Self {
        Self {
            left: Tensor::zeros(vec![out, rank]).expect("small shape"),
            right: Tensor::zeros(vec![rank, inp]).expect("small shape"),
            rank,
            captured_energy: 0.0,
        }
    }

    /// `[out x r]`
    pub fn left(&self) -> &Tensor {
        &self.left
    }

    /// `[r x in]`
    pub fn right(&self) -> &Tensor {
        &self.right
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn captured_energy(&self) -> f64 {
        self.captured_energy
    }

    pub fn out_features(&self) -> usize {
        self.left.shape()[0]
    }

    pub fn in_features(&self) -> usize {
        self.right.shape()[1]
    }

    /// Stored parameters, `r * (out + in)`.
    pub fn parameter_count(&self) -> usize {
        self.rank * (self.out_features() + self.in_features())
    }

    /// Parameter overhead relative to the dense weight.
    pub fn overhead_fraction(&self) -> f64 {
        self.parameter_count() as f64 / (self.out_features() * self.in_features()) as f64
    }

    /// `left * right`.
    pub fn product(&self) -> Tensor {
        Tensor::from_dmatrix(&(self.left.to_dmatrix() * self.right.to_dmatrix()))
    }
}

/// `W - dequantize(q)`.
pub fn error_matrix(w: &Tensor, q: &QuantizedTensor) -> Result<Tensor> {
    let deq = q.dequantize()?;
    w.ensure_same_shape(&deq)?;
    let data = w.data().iter().zip(deq.data()).map(|(a, b)| a - b).collect();
    Tensor::new(w.shape().to_vec(), data)
}

pub fn lorc_factorize(e: &Tensor, rank: usize) -> Result<LorcFactors> {
    lorc_factorize_with(e, rank, SvdMethod::Dense)
}

pub fn lorc_factorize_with(e: &Tensor, rank: usize, method: SvdMethod) -> Result<LorcFactors> {
    if e.ndim() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "error matrix must be 2-D, got shape {:?}",
            e.shape()
        )));
    }
    e.check_finite()?;
    let (m, n) = (e.shape()[0], e.shape()[1]);
    if rank == 0 || rank > m.min(n) {
        return Err(Error::InvalidArgument(format!(
            "rank {rank} outside 1..={} for a {m}x{n} matrix",
            m.min(n)
        )));
    }
    let mat = e.to_dmatrix();
    let total = mat.norm_squared();
    let (u, sigma, vt) = match method {
        SvdMethod::Dense => dense_svd(mat)?,
        SvdMethod::Randomized {
            oversample,
            power_iters,
            seed,
        } => randomized_svd(&mat, rank, oversample, power_iters, seed)?,
    };
    let mut left = DMatrix::zeros(m, rank);
    let mut right = DMatrix::zeros(rank, n);
    let mut kept = 0.0;
    for k in 0..rank {
        let s = sigma[k];
        kept += s * s;
        let root = s.sqrt();
        left.set_column(k, &(u.column(k) * root));
        right.set_row(k, &(vt.row(k) * root));
    }
    let captured_energy = if total > 0.0 {
        (kept / total).clamp(0.0, 1.0)
    } else {
        1.0
    };
    Ok(LorcFactors {
        left: Tensor::from_dmatrix(&left),
        right: Tensor::from_dmatrix(&right),
        rank,
        captured_energy,
    })
}

/// `dequantize(q) + left * right`.
pub fn apply_lorc(q: &QuantizedTensor, f: &LorcFactors) -> Result<Tensor> {
    let deq = q.dequantize()?;
    if deq.shape() != [f.out_features(), f.in_features()] {
        return Err(Error::ShapeMismatch(format!(
            "quantized tensor {:?} vs factors {}x{}",
            deq.shape(),
            f.out_features(),
            f.in_features()
        )));
    }
    let corrected = deq.to_dmatrix() + f.left.to_dmatrix() * f.right.to_dmatrix();
    Ok(Tensor::from_dmatrix(&corrected))
}

type Svd = (DMatrix<f64>, DVector<f64>, DMatrix<f64>);

/// Thin SVD with singular values sorted in descending order.
fn dense_svd(mat: DMatrix<f64>) -> Result<Svd> {
    let svd = SVD::try_new(mat, true, true, SVD_EPS, SVD_MAX_ITER).ok_or(Error::SvdNonConvergence)?;
    let u = svd.u.ok_or(Error::SvdNonConvergence)?;
    let vt = svd.v_t.ok_or(Error::SvdNonConvergence)?;
    let s = svd.singular_values;
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    let u = DMatrix::from_fn(u.nrows(), order.len(), |i, k| u[(i, order[k])]);
    let vt = DMatrix::from_fn(order.len(), vt.ncols(), |k, j| vt[(order[k], j)]);
    let s = DVector::from_iterator(order.len(), order.iter().map(|&k| s[k]));
    Ok((u, s, vt))
}

fn randomized_svd(mat: &DMatrix<f64>, rank: usize, oversample: usize, power_iters: usize, seed: u64) -> Result<Svd> {
    let (m, n) = mat.shape();
    let l = (rank + oversample).min(m.min(n));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let omega = DMatrix::from_fn(n, l, |_, _| StandardNormal.sample(&mut rng));
    let mut q = (mat * omega).qr().q();
    for _ in 0..power_iters {
        let z = (mat.transpose() * &q).qr().q();
        q = (mat * z).qr().q();
    }
    let b = q.transpose() * mat;
    let (ub, s, vt) = dense_svd(b)?;
    Ok((q * ub, s, vt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::quantize;
    use crate::spec::QuantSpec;

    fn gaussian(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect();
        Tensor::from_rows(rows, cols, data).unwrap()
    }

    fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
        a.frobenius_distance(b).unwrap() / b.frobenius_norm()
    }

    #[test]
    fn rank_one_is_exact() {
        let u = [1.0, -2.0, 0.5, 3.0];
        let v = [0.25, 4.0, -1.0];
        let data = u.iter().flat_map(|a| v.iter().map(move |b| a * b)).collect();
        let e = Tensor::from_rows(4, 3, data).unwrap();
        let f = lorc_factorize(&e, 1).unwrap();
        assert!(rel_err(&f.product(), &e) < 1e-10);
        assert!((f.captured_energy() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn full_rank_recovers_matrix() {
        let e = gaussian(12, 9, 1);
        let f = lorc_factorize(&e, 9).unwrap();
        assert!(rel_err(&f.product(), &e) < 1e-12);
    }

    #[test]
    fn energy_is_monotone_in_rank() {
        let e = gaussian(20, 30, 2);
        let energies: Vec<f64> = (1..=20)
            .map(|r| lorc_factorize(&e, r).unwrap().captured_energy())
            .collect();
        assert!(energies.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn rank_out_of_range_rejected() {
        let e = gaussian(4, 6, 3);
        assert!(lorc_factorize(&e, 0).is_err());
        assert!(lorc_factorize(&e, 5).is_err());
    }

    #[test]
    fn zero_factors_leave_dequantized_weights() {
        let w = gaussian(8, 16, 4);
        let q = quantize(&w, &"fp4:e2m1:group8".parse::<QuantSpec>().unwrap()).unwrap();
        let f = LorcFactors::zeros(8, 16, 3);
        assert_eq!(apply_lorc(&q, &f).unwrap(), q.dequantize().unwrap());
    }

    #[test]
    fn full_rank_factors_restore_weights() {
        let w = gaussian(10, 14, 5);
        let q = quantize(&w, &"int4:sym:group7".parse::<QuantSpec>().unwrap()).unwrap();
        let f = lorc_factorize(&error_matrix(&w, &q).unwrap(), 10).unwrap();
        assert!(rel_err(&apply_lorc(&q, &f).unwrap(), &w) < 1e-12);
    }

    #[test]
    fn int8_error_within_half_step() {
        let w = gaussian(6, 32, 6);
        let spec: QuantSpec = "int8:sym:group8".parse().unwrap();
        let q = quantize(&w, &spec).unwrap();
        let e = error_matrix(&w, &q).unwrap();
        let layout = q.layout();
        for g in 0..layout.scale_count() {
            let half = q.scales()[g] / 2.0;
            assert!(e.data()[layout.group_range(g)]
                .iter()
                .all(|v| v.abs() <= half * (1.0 + 1e-12)));
        }
    }

    #[test]
    fn randomized_tracks_dense() {
        // Decaying spectrum so the leading subspace is well separated.
        let a = gaussian(60, 8, 7).to_dmatrix();
        let b = gaussian(8, 50, 8).to_dmatrix();
        let noise = gaussian(60, 50, 9).to_dmatrix() * 1e-3;
        let e = Tensor::from_dmatrix(&(a * b + noise));
        let dense = lorc_factorize(&e, 8).unwrap();
        let rand = lorc_factorize_with(&e, 8, SvdMethod::randomized(1)).unwrap();
        assert!(rel_err(&rand.product(), &dense.product()) < 1e-6);
        assert!((rand.captured_energy() - dense.captured_energy()).abs() < 1e-9);
    }

    #[test]
    fn overhead_accounting() {
        let f = LorcFactors::zeros(512, 256, 8);
        assert_eq!(f.parameter_count(), 8 * 768);
        assert!((f.overhead_fraction() - 6144.0 / 131072.0).abs() < 1e-15);
    }
}
