//! Software codec for small ExMy minifloat formats.
//!
//! A format is `1 sign + exp_bits exponent + mant_bits mantissa` bits, at most
//! eight bits in total, so every code fits in a `u8`. Bit layout, MSB first:
//! `sign | exponent | mantissa`. Exponent field 0 encodes subnormals
//! `(mant / 2^m) * 2^(1 - bias)`; any other field encodes
//! `(1 + mant / 2^m) * 2^(exp - bias)`. There are no infinities: with
//! [`NanPolicy::None`] every code is finite, and [`NanPolicy::ReserveMaxCode`]
//! sets aside the all-ones magnitude pattern as NaN (H100-style E4M3, max 448).
//!
//! Encoding is round-to-nearest with ties going to the even magnitude code
//! (for `mant_bits >= 1` that is the even mantissa field), and saturates to
//! the largest finite magnitude.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum NanPolicy {
    #[default]
    None,
    ReserveMaxCode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MiniFloatFormat {
    exp_bits: u8,
    mant_bits: u8,
    bias: i32,
    nan_policy: NanPolicy,
    subnormals: bool,
}

impl MiniFloatFormat {
    pub const E5M2: Self = Self::preset(5, 2);
    pub const E4M3: Self = Self::preset(4, 3);
    pub const E3M0: Self = Self::preset(3, 0);
    pub const E2M1: Self = Self::preset(2, 1);

    const fn preset(exp_bits: u8, mant_bits: u8) -> Self {
        Self {
            exp_bits,
            mant_bits,
            bias: (1 << (exp_bits - 1)) - 1,
            nan_policy: NanPolicy::None,
            subnormals: true,
        }
    }

    /// Custom layout with the IEEE-style default bias `2^(exp_bits-1) - 1`.
    pub fn new(exp_bits: u8, mant_bits: u8) -> Result<Self> {
        if exp_bits == 0 {
            return Err(Error::InvalidFormat("exp_bits must be at least 1".into()));
        }
        if 1 + exp_bits as u32 + mant_bits as u32 > 8 {
            return Err(Error::InvalidFormat(format!(
                "E{exp_bits}M{mant_bits} needs more than 8 bits"
            )));
        }
        Ok(Self::preset(exp_bits, mant_bits))
    }

    pub fn with_bias(mut self, bias: i32) -> Self {
        self.bias = bias;
        self
    }

    pub fn with_nan_policy(mut self, nan_policy: NanPolicy) -> Self {
        self.nan_policy = nan_policy;
        self
    }

    pub fn with_subnormals(mut self, subnormals: bool) -> Self {
        self.subnormals = subnormals;
        self
    }

    pub fn exp_bits(&self) -> u8 {
        self.exp_bits
    }

    pub fn mant_bits(&self) -> u8 {
        self.mant_bits
    }

    pub fn bias(&self) -> i32 {
        self.bias
    }

    pub fn nan_policy(&self) -> NanPolicy {
        self.nan_policy
    }

    pub fn subnormals(&self) -> bool {
        self.subnormals
    }

    pub fn total_bits(&self) -> u8 {
        1 + self.exp_bits + self.mant_bits
    }

    /// Number of distinct bit patterns, `2^total_bits`.
    pub fn code_count(&self) -> usize {
        1 << self.total_bits()
    }

    fn magnitude_mask(&self) -> u8 {
        ((1u16 << (self.exp_bits + self.mant_bits)) - 1) as u8
    }

    fn sign_bit(&self) -> u8 {
        1 << (self.exp_bits + self.mant_bits)
    }

    /// Largest magnitude code that decodes to a finite value.
    fn max_magnitude_code(&self) -> u8 {
        match self.nan_policy {
            NanPolicy::None => self.magnitude_mask(),
            NanPolicy::ReserveMaxCode => self.magnitude_mask() - 1,
        }
    }

    fn min_normal_exponent(&self) -> i32 {
        1 - self.bias
    }

    fn decode_magnitude(&self, mag: u8) -> f64 {
        let exp = (mag >> self.mant_bits) as i32;
        let mant = (mag & ((1u8 << self.mant_bits) - 1)) as f64;
        let frac = mant / (1u32 << self.mant_bits) as f64;
        if exp == 0 {
            if self.subnormals && self.mant_bits > 0 {
                frac * exp2i(self.min_normal_exponent())
            } else {
                0.0
            }
        } else {
            (1.0 + frac) * exp2i(exp - self.bias)
        }
    }

    /// Decodes raw bits. Bits above `total_bits` are ignored.
    pub fn decode_bits(&self, bits: u8) -> f64 {
        let mag = bits & self.magnitude_mask();
        if self.nan_policy == NanPolicy::ReserveMaxCode && mag == self.magnitude_mask() {
            return f64::NAN;
        }
        let v = self.decode_magnitude(mag);
        if bits & self.sign_bit() != 0 {
            -v
        } else {
            v
        }
    }

    pub fn max_finite(&self) -> f64 {
        self.decode_magnitude(self.max_magnitude_code())
    }

    /// Every finite value, ascending, signed zeros collapsed to one `0`.
    pub fn enumerate_values(&self) -> Vec<f64> {
        let mut values: Vec<f64> = (0..self.code_count())
            .map(|c| self.decode_bits(c as u8))
            .filter(|v| !v.is_nan())
            .map(|v| if v == 0.0 { 0.0 } else { v })
            .collect();
        values.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        values.dedup();
        values
    }

    /// Nearest-value encoding; NaN is rejected.
    pub fn encode_nearest(&self, x: f64) -> Result<MiniFloatCode> {
        if x.is_nan() {
            return Err(Error::InvalidArgument("cannot encode NaN".into()));
        }
        Ok(MiniFloatCode {
            bits: self.encode_bits(x),
            format: *self,
        })
    }

    /// Hot-path encoder. The caller guarantees `x` is not NaN.
    pub fn encode_bits(&self, x: f64) -> u8 {
        debug_assert!(!x.is_nan());
        let a = x.abs();
        let mag = if a >= self.max_finite() {
            self.max_magnitude_code()
        } else {
            self.nearest_magnitude(a)
        };
        if mag == 0 {
            0
        } else if x < 0.0 {
            mag | self.sign_bit()
        } else {
            mag
        }
    }

    /// Nearest magnitude code for `0 <= a < max_finite`.
    fn nearest_magnitude(&self, a: f64) -> u8 {
        if a == 0.0 {
            return 0;
        }
        let m = self.mant_bits as i32;
        let emin = self.min_normal_exponent();
        let min_normal = exp2i(emin);
        let min_normal_code = 1u8 << self.mant_bits;

        if a < min_normal && !(self.subnormals && m > 0) {
            // Only 0 and the smallest normal are candidates. At the midpoint
            // zero wins: for m == 0 it is the only even code, for m >= 1 both
            // codes are even and the smaller magnitude is taken.
            return if a > min_normal / 2.0 { min_normal_code } else { 0 };
        }

        let (base, ulp) = if a < min_normal {
            (0i64, exp2i(emin - m))
        } else {
            let e = floor_log2(a);
            let exp_field = (e + self.bias) as i64;
            ((exp_field - 1) << m, exp2i(e - m))
        };
        let q = a / ulp;
        let lo = q.floor();
        let frac = q - lo;
        let lo_code = base + lo as i64;
        let code = if frac < 0.5 {
            lo_code
        } else if frac > 0.5 {
            lo_code + 1
        } else if lo_code % 2 == 0 {
            lo_code
        } else {
            lo_code + 1
        };
        code as u8
    }
}

impl fmt::Display for MiniFloatFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "e{}m{}", self.exp_bits, self.mant_bits)?;
        if self.bias != Self::preset(self.exp_bits, self.mant_bits).bias {
            write!(f, "-b{}", self.bias)?;
        }
        if self.nan_policy == NanPolicy::ReserveMaxCode {
            write!(f, "-nan")?;
        }
        if !self.subnormals {
            write!(f, "-nosub")?;
        }
        Ok(())
    }
}

/// Parses `eXmY` with optional `-b<bias>`, `-nan` and `-nosub` suffixes,
/// e.g. `e4m3`, `e4m3-nan`, `e2m1-nosub`.
impl FromStr for MiniFloatFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        let mut parts = lower.split('-');
        let head = parts.next().unwrap_or_default();
        let bad = || Error::InvalidFormat(format!("cannot parse `{s}` as eXmY"));
        let rest = head.strip_prefix('e').ok_or_else(bad)?;
        let (e, m) = rest.split_once('m').ok_or_else(bad)?;
        let exp_bits: u8 = e.parse().map_err(|_| bad())?;
        let mant_bits: u8 = m.parse().map_err(|_| bad())?;
        let mut format = Self::new(exp_bits, mant_bits)?;
        for suffix in parts {
            match suffix {
                "nan" => format = format.with_nan_policy(NanPolicy::ReserveMaxCode),
                "nosub" => format = format.with_subnormals(false),
                b if b.starts_with('b') => {
                    let bias = b[1..].parse().map_err(|_| bad())?;
                    format = format.with_bias(bias);
                }
                _ => return Err(bad()),
            }
        }
        Ok(format)
    }
}

/// A raw code tied to its format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MiniFloatCode {
    pub bits: u8,
    pub format: MiniFloatFormat,
}

impl MiniFloatCode {
    pub fn decode(&self) -> f64 {
        self.format.decode_bits(self.bits)
    }
}

/// Exact `2^e` for the exponent range used here.
pub(crate) fn exp2i(e: i32) -> f64 {
    ldexp(1.0, e)
}

/// `x * 2^e`, applied in steps so that intermediate powers never overflow or
/// flush to zero when the result itself is representable.
pub(crate) fn ldexp(mut x: f64, mut e: i32) -> f64 {
    const STEP: i32 = 1000;
    while e > STEP {
        x *= f64::from_bits(((STEP + 1023) as u64) << 52);
        e -= STEP;
    }
    while e < -STEP {
        x *= f64::from_bits(((1023 - STEP) as u64) << 52);
        e += STEP;
    }
    if e >= -1022 {
        x * f64::from_bits(((e + 1023) as u64) << 52)
    } else {
        x * f64::from_bits(((e + 1023 + 60) as u64) << 52) * f64::from_bits((1023u64 - 60) << 52)
    }
}

/// `floor(log2 a)` for a positive, normal `a`, read from the exponent field.
fn floor_log2(a: f64) -> i32 {
    if a < f64::MIN_POSITIVE {
        return a.log2().floor() as i32;
    }
    ((a.to_bits() >> 52) & 0x7ff) as i32 - 1023
}

#[cfg(test)]
mod tests {
    use super::*;

    fn code(sign: u8, exp: u8, mant: u8, f: MiniFloatFormat) -> u8 {
        (sign << (f.exp_bits + f.mant_bits)) | (exp << f.mant_bits) | mant
    }

    #[test]
    fn e2m1_values() {
        let v = MiniFloatFormat::E2M1.enumerate_values();
        let pos = [0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0];
        let mut expected: Vec<f64> = pos.iter().rev().map(|v| -v).collect();
        expected.push(0.0);
        expected.extend(pos);
        assert_eq!(v, expected);
    }

    #[test]
    fn e3m0_powers_of_two() {
        let v = MiniFloatFormat::E3M0.enumerate_values();
        assert_eq!(v.len(), 15);
        for x in v.iter().filter(|x| **x > 0.0) {
            assert_eq!(x.log2().fract(), 0.0);
        }
        assert_eq!(MiniFloatFormat::E3M0.max_finite(), 16.0);
        assert_eq!(v[8], 0.25);
    }

    #[test]
    fn max_finite_presets() {
        assert_eq!(MiniFloatFormat::E2M1.max_finite(), 6.0);
        assert_eq!(MiniFloatFormat::E4M3.max_finite(), 480.0);
        assert_eq!(MiniFloatFormat::E5M2.max_finite(), 114688.0);
        let h100 = MiniFloatFormat::E4M3.with_nan_policy(NanPolicy::ReserveMaxCode);
        assert_eq!(h100.max_finite(), 448.0);
        assert!(h100.decode_bits(0x7f).is_nan());
        assert_eq!(h100.enumerate_values().len(), 253);
    }

    #[test]
    fn decode_examples() {
        let f = MiniFloatFormat::E2M1;
        assert_eq!(f.decode_bits(0), 0.0);
        assert_eq!(f.decode_bits(code(0, 3, 1, f)), 6.0);
        let g = MiniFloatFormat::E5M2;
        assert_eq!(g.decode_bits(code(1, 15, 0, g)), -1.0);
    }

    #[test]
    fn encode_examples() {
        let f = MiniFloatFormat::E2M1;
        assert_eq!(f.encode_nearest(0.0).unwrap().decode(), 0.0);
        assert_eq!(f.encode_nearest(2.4).unwrap().decode(), 2.0);
        assert_eq!(MiniFloatFormat::E4M3.encode_nearest(1000.0).unwrap().decode(), 480.0);
        assert_eq!(MiniFloatFormat::E4M3.encode_nearest(-1e9).unwrap().decode(), -480.0);
        assert!(f.encode_nearest(f64::NAN).is_err());
    }

    #[test]
    fn ties_go_to_even_code() {
        let f = MiniFloatFormat::E2M1;
        // 2.5 sits between 2 (mant 0) and 3 (mant 1).
        assert_eq!(f.decode_bits(f.encode_bits(2.5)), 2.0);
        // 1.25 between 1 (mant 0) and 1.5 (mant 1).
        assert_eq!(f.decode_bits(f.encode_bits(1.25)), 1.0);
        // 1.75 between 1.5 (mant 1) and 2 (mant 0 of next binade).
        assert_eq!(f.decode_bits(f.encode_bits(1.75)), 2.0);
        // 0.25 between 0 and the subnormal 0.5.
        assert_eq!(f.decode_bits(f.encode_bits(0.25)), 0.0);
        // E3M0: 3 lies between 2 (code 2) and 4 (code 3).
        let g = MiniFloatFormat::E3M0;
        assert_eq!(g.decode_bits(g.encode_bits(3.0)), 2.0);
        // 6 lies between 4 (code 3) and 8 (code 4).
        assert_eq!(g.decode_bits(g.encode_bits(6.0)), 8.0);
    }

    #[test]
    fn negative_values_never_produce_negative_zero_code() {
        let f = MiniFloatFormat::E2M1;
        assert_eq!(f.encode_bits(-0.1), 0);
        assert_eq!(f.encode_bits(-0.0), 0);
    }

    #[test]
    fn without_subnormals_e2m1_loses_half() {
        let f = MiniFloatFormat::E2M1.with_subnormals(false);
        let v = f.enumerate_values();
        assert!(!v.contains(&0.5));
        assert_eq!(f.decode_bits(f.encode_bits(0.6)), 1.0);
        assert_eq!(f.decode_bits(f.encode_bits(0.4)), 0.0);
        assert_eq!(f.decode_bits(f.encode_bits(0.5)), 0.0);
    }

    #[test]
    fn rejects_bad_layouts() {
        assert!(MiniFloatFormat::new(0, 3).is_err());
        assert!(MiniFloatFormat::new(5, 3).is_err());
        assert!("e0m3".parse::<MiniFloatFormat>().is_err());
        assert!("int8".parse::<MiniFloatFormat>().is_err());
    }

    #[test]
    fn parse_and_display() {
        for name in ["e5m2", "e4m3", "e3m0", "e2m1", "e4m3-nan", "e2m1-nosub", "e3m2-b5"] {
            let f: MiniFloatFormat = name.parse().unwrap();
            assert_eq!(f.to_string(), name);
        }
        assert_eq!("E4M3".parse::<MiniFloatFormat>().unwrap(), MiniFloatFormat::E4M3);
    }
}
