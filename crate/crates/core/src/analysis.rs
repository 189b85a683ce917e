//! Distribution diagnostics, error metrics and seeded synthetic data.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Serialize, Serializer};

use crate::error::{Error, Result};
use crate::gptq::{proxy_loss, CalibrationSet};
use crate::quant::{GroupLayout, QuantizedTensor};
use crate::tensor::{checked_numel, Tensor};

pub const DEFAULT_BINS: usize = 100;

/// Entries further than this many standard deviations from the rest of the
/// data are outliers.
pub const OUTLIER_SIGMAS: f64 = 6.0;

/// Equal-width histogram over `[lo, hi]`; the last bin is closed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn build(values: &[f64], lo: f64, hi: f64, bins: usize) -> Result<Self> {
        if bins == 0 {
            return Err(Error::InvalidArgument("histogram needs at least one bin".into()));
        }
        let mut counts = vec![0u64; bins];
        let width = hi - lo;
        for &v in values {
            let b = if width > 0.0 {
                (((v - lo) / width * bins as f64) as usize).min(bins - 1)
            } else {
                0
            };
            counts[b] += 1;
        }
        Ok(Self { lo, hi, counts })
    }

    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    /// `bins + 1` edges from `lo` to `hi`.
    pub fn edges(&self) -> Vec<f64> {
        let n = self.bins();
        (0..=n)
            .map(|k| {
                if k == n {
                    self.hi
                } else {
                    self.lo + (self.hi - self.lo) * k as f64 / n as f64
                }
            })
            .collect()
    }

    /// Two columns per line, bin center and count, ready for gnuplot.
    pub fn to_gnuplot(&self) -> String {
        let edges = self.edges();
        let mut out = String::from("# center count\n");
        for (k, c) in self.counts.iter().enumerate() {
            out.push_str(&format!("{} {}\n", 0.5 * (edges[k] + edges[k + 1]), c));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistributionReport {
    pub count: usize,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub skewness: f64,
    pub excess_kurtosis: f64,
    pub outlier_count: usize,
    pub histogram: Histogram,
}

pub fn summarize(t: &Tensor) -> Result<DistributionReport> {
    summarize_with_bins(t, DEFAULT_BINS)
}

pub fn summarize_with_bins(t: &Tensor, bins: usize) -> Result<DistributionReport> {
    let x = t.data();
    if x.is_empty() {
        return Err(Error::InvalidArgument("cannot summarize an empty tensor".into()));
    }
    t.check_finite()?;
    let m = Moments::of(x);
    let (min, max) = x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    let n = x.len() as f64;
    let var = m.m2 / n;
    let (skewness, excess_kurtosis) = if var > 0.0 {
        ((m.m3 / n) / var.powf(1.5), (m.m4 / n) / (var * var) - 3.0)
    } else {
        (0.0, 0.0)
    };
    Ok(DistributionReport {
        count: x.len(),
        min,
        max,
        mean: m.mean,
        std: var.sqrt(),
        skewness,
        excess_kurtosis,
        outlier_count: outlier_mask(x).iter().filter(|&&o| o).count(),
        histogram: Histogram::build(x, min, max, bins)?,
    })
}

/// Central moment sums in one streaming pass.
#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    n: f64,
    mean: f64,
    m2: f64,
    m3: f64,
    m4: f64,
}

impl Moments {
    fn of(values: &[f64]) -> Self {
        let mut s = Self::default();
        for &x in values {
            let n1 = s.n;
            s.n += 1.0;
            let n = s.n;
            let delta = x - s.mean;
            let dn = delta / n;
            let dn2 = dn * dn;
            let term = delta * dn * n1;
            s.mean += dn;
            s.m4 += term * dn2 * (n * n - 3.0 * n + 3.0) + 6.0 * dn2 * s.m2 - 4.0 * dn * s.m3;
            s.m3 += term * dn * (n - 2.0) - 3.0 * dn * s.m2;
            s.m2 += term;
        }
        s
    }
}

/// Marks entries whose distance from the mean of the other entries exceeds
/// six standard deviations of those other entries.
///
/// Excluding the entry itself matters for small inputs: with the entry
/// included, no single value among `n` can sit more than `sqrt(n - 1)`
/// standard deviations from the mean, so a 15-element vector could never
/// report an outlier.
pub fn outlier_mask(x: &[f64]) -> Vec<bool> {
    let n = x.len();
    if n < 2 {
        return vec![false; n];
    }
    let m = Moments::of(x);
    let nf = n as f64;
    x.iter()
        .map(|&v| {
            let d = v - m.mean;
            let dist = d.abs() * nf / (nf - 1.0);
            let rest_m2 = (m.m2 - d * d * nf / (nf - 1.0)).max(0.0);
            let rest_std = (rest_m2 / (nf - 1.0)).sqrt();
            dist > OUTLIER_SIGMAS * rest_std && dist > 0.0
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SyntheticKind {
    /// Standard normal draws.
    Normal,
    /// Normal draws with a `rate` fraction (at least one entry) replaced by
    /// `+-magnitude` standard deviations.
    OutlierInjected { rate: f64, magnitude: f64 },
    /// `max(0, z)` of standard normal draws.
    ReluSkewed,
}

impl SyntheticKind {
    pub fn validate(&self) -> Result<()> {
        if let SyntheticKind::OutlierInjected { rate, magnitude } = *self {
            if !(rate > 0.0 && rate < 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "outlier rate must lie in (0, 1), got {rate}"
                )));
            }
            if !(magnitude.is_finite() && magnitude > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "outlier magnitude must be positive and finite, got {magnitude}"
                )));
            }
        }
        Ok(())
    }
}

impl fmt::Display for SyntheticKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SyntheticKind::Normal => write!(f, "normal"),
            SyntheticKind::OutlierInjected { rate, magnitude } => {
                write!(f, "outlier_injected:{rate}:{magnitude}")
            }
            SyntheticKind::ReluSkewed => write!(f, "relu_skewed"),
        }
    }
}

/// `normal`, `relu_skewed`, `outlier_injected[:rate[:magnitude]]`
/// (defaults 0.01 and 100).
impl FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut it = s.split(':');
        let head = it.next().unwrap_or_default();
        let kind = match head {
            "normal" => SyntheticKind::Normal,
            "relu_skewed" => SyntheticKind::ReluSkewed,
            "outlier_injected" => {
                let mut num = |default: f64| -> Result<f64> {
                    match it.next() {
                        None => Ok(default),
                        Some(v) => v
                            .parse()
                            .map_err(|_| Error::InvalidArgument(format!("bad number `{v}` in `{s}`"))),
                    }
                };
                let rate = num(0.01)?;
                let magnitude = num(100.0)?;
                SyntheticKind::OutlierInjected { rate, magnitude }
            }
            _ => return Err(Error::InvalidArgument(format!("unknown synthetic kind `{s}`"))),
        };
        if it.next().is_some() {
            return Err(Error::InvalidArgument(format!("trailing tokens in `{s}`")));
        }
        kind.validate()?;
        Ok(kind)
    }
}

/// Deterministic per `(kind, shape, seed)`.
pub fn gen_synthetic(kind: SyntheticKind, shape: &[usize], seed: u64) -> Result<Tensor> {
    kind.validate()?;
    let n = checked_numel(shape)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    match kind {
        SyntheticKind::Normal => {}
        SyntheticKind::ReluSkewed => data.iter_mut().for_each(|v| *v = v.max(0.0)),
        SyntheticKind::OutlierInjected { rate, magnitude } => {
            if n > 0 {
                let count = ((rate * n as f64).round() as usize).clamp(1, n);
                for i in index::sample(&mut rng, n, count) {
                    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    data[i] = sign * magnitude;
                }
            }
        }
    }
    Tensor::new(shape.to_vec(), data)
}

/// A 15-element vector with 14 values clustered in `(-1, 1)` and a single
/// entry of 100.
pub fn outlier_demo_vector() -> Tensor {
    Tensor::vector(vec![
        0.12, -0.35, 0.57, -0.81, 0.23, 0.94, -0.46, 100.0, 0.05, -0.68, 0.39, -0.17, 0.76, -0.92, 0.61,
    ])
}

/// Signal-to-quantization-noise ratio in dB, serialized as `"+inf"` when the
/// reconstruction is exact.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Decibels(pub f64);

impl Serialize for Decibels {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0 == f64::INFINITY {
            s.serialize_str("+inf")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl fmt::Display for Decibels {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0 == f64::INFINITY {
            write!(f, "+inf")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorReport {
    pub mse: f64,
    pub max_abs_err: f64,
    pub sqnr_db: Decibels,
    /// Frobenius norm of `W - W_hat`.
    pub frobenius_err: f64,
    /// `||(W - W_hat) X^T||_F`, present when calibration data is supplied.
    pub proxy_loss: Option<f64>,
    pub per_group_mse: Vec<f64>,
    /// Metrics restricted to entries of `W` that are not outliers.
    pub clustered_mse: f64,
    pub clustered_max_abs_err: f64,
}

impl ErrorReport {
    /// Metrics of an arbitrary reconstruction; `layout` drives `per_group_mse`.
    pub fn between(
        w: &Tensor,
        w_hat: &Tensor,
        layout: Option<&GroupLayout>,
        calib: Option<&CalibrationSet>,
    ) -> Result<Self> {
        w.ensure_same_shape(w_hat)?;
        if w.is_empty() {
            return Err(Error::InvalidArgument("cannot compare empty tensors".into()));
        }
        let err: Vec<f64> = w.data().iter().zip(w_hat.data()).map(|(a, b)| a - b).collect();
        let sq: f64 = err.iter().map(|e| e * e).sum();
        let mse = sq / err.len() as f64;
        let max_abs_err = err.iter().fold(0.0f64, |m, e| m.max(e.abs()));
        let signal = w.data().iter().map(|v| v * v).sum::<f64>() / err.len() as f64;
        let sqnr_db = if mse == 0.0 {
            f64::INFINITY
        } else {
            10.0 * (signal / mse).log10()
        };
        let per_group_mse = match layout {
            None => vec![mse],
            Some(l) => (0..l.scale_count())
                .map(|g| {
                    let r = l.group_range(g);
                    let len = r.len().max(1) as f64;
                    err[r].iter().map(|e| e * e).sum::<f64>() / len
                })
                .collect(),
        };
        let outliers = outlier_mask(w.data());
        let (mut c_sq, mut c_n, mut c_max) = (0.0, 0usize, 0.0f64);
        for (e, &o) in err.iter().zip(&outliers) {
            if !o {
                c_sq += e * e;
                c_n += 1;
                c_max = c_max.max(e.abs());
            }
        }
        let proxy_loss = calib.map(|c| proxy_loss(w, w_hat, c)).transpose()?;
        Ok(Self {
            mse,
            max_abs_err,
            sqnr_db: Decibels(sqnr_db),
            frobenius_err: sq.sqrt(),
            proxy_loss,
            per_group_mse,
            clustered_mse: if c_n > 0 { c_sq / c_n as f64 } else { 0.0 },
            clustered_max_abs_err: c_max,
        })
    }

    pub fn of(w: &Tensor, q: &QuantizedTensor, calib: Option<&CalibrationSet>) -> Result<Self> {
        Self::between(w, &q.dequantize()?, Some(&q.layout()), calib)
    }
}

/// Index of the best candidate per metric; ties go to the earliest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Winners {
    pub mse: usize,
    pub max_abs_err: usize,
    pub sqnr_db: usize,
    pub proxy_loss: Option<usize>,
    pub clustered_mse: usize,
    pub clustered_max_abs_err: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub reports: Vec<ErrorReport>,
    pub winners: Winners,
}

pub fn compare(w: &Tensor, candidates: &[QuantizedTensor], calib: Option<&CalibrationSet>) -> Result<Comparison> {
    let reports = candidates
        .iter()
        .map(|q| ErrorReport::of(w, q, calib))
        .collect::<Result<Vec<_>>>()?;
    Comparison::from_reports(reports)
}

impl Comparison {
    pub fn from_reports(reports: Vec<ErrorReport>) -> Result<Self> {
        if reports.is_empty() {
            return Err(Error::InvalidArgument("nothing to compare".into()));
        }
        let argmin = |f: &dyn Fn(&ErrorReport) -> f64| {
            (1..reports.len()).fold(0, |best, i| if f(&reports[i]) < f(&reports[best]) { i } else { best })
        };
        let winners = Winners {
            mse: argmin(&|r| r.mse),
            max_abs_err: argmin(&|r| r.max_abs_err),
            sqnr_db: argmin(&|r| -r.sqnr_db.0),
            proxy_loss: reports[0]
                .proxy_loss
                .is_some()
                .then(|| argmin(&|r| r.proxy_loss.unwrap_or(f64::INFINITY))),
            clustered_mse: argmin(&|r| r.clustered_mse),
            clustered_max_abs_err: argmin(&|r| r.clustered_max_abs_err),
        };
        Ok(Self { reports, winners })
    }
}
