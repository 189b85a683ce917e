//! Quantization recipes and their string form.
//!
//! Grammar (colon separated, case-insensitive):
//!
//! ```text
//! int<bits>:<sym|asym>:<granularity>[:<constraint>]
//! fp<bits>:<format>:<granularity>[:<constraint>]
//! granularity := tensor | token | group<N>
//! constraint  := none | m1 | m2[:<rows>]
//! ```
//!
//! Examples: `int8:asym:token`, `fp4:e2m1:group256:m2`, `fp4:e2m1:group256:m2:4`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::minifloat::MiniFloatFormat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    Int,
    Fp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NumberFormat {
    Int { bits: u8, symmetric: bool },
    Fp(MiniFloatFormat),
}

impl NumberFormat {
    pub fn bits(&self) -> u8 {
        match self {
            NumberFormat::Int { bits, .. } => *bits,
            NumberFormat::Fp(f) => f.total_bits(),
        }
    }

    pub fn family(&self) -> Family {
        match self {
            NumberFormat::Int { .. } => Family::Int,
            NumberFormat::Fp(_) => Family::Fp,
        }
    }

    pub fn is_asymmetric(&self) -> bool {
        matches!(self, NumberFormat::Int { symmetric: false, .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Granularity {
    PerTensor,
    /// Contiguous groups of `n` elements along the last axis.
    PerGroup(usize),
    /// One scale per row of a 2-D matrix.
    PerToken,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum ScaleConstraint {
    #[default]
    None,
    M1,
    /// Compute groups of `group_rows` consecutive rows share a maximum scale.
    M2 {
        group_rows: usize,
    },
}

impl ScaleConstraint {
    pub fn is_none(&self) -> bool {
        matches!(self, ScaleConstraint::None)
    }
}

impl fmt::Display for ScaleConstraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScaleConstraint::None => write!(f, "none"),
            ScaleConstraint::M1 => write!(f, "m1"),
            ScaleConstraint::M2 { group_rows } => write!(f, "m2:{group_rows}"),
        }
    }
}

/// Parses the `--scale-constraint` flag form: `none`, `m1`, `m2`, `m2:<rows>`.
impl FromStr for ScaleConstraint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        let mut it = lower.split(':');
        let c = parse_constraint(&lower, it.next().unwrap_or_default(), it.next())?;
        if it.next().is_some() {
            return Err(Error::spec(s, "trailing tokens after scale constraint"));
        }
        Ok(c)
    }
}

fn parse_constraint(full: &str, head: &str, rows: Option<&str>) -> Result<ScaleConstraint> {
    match (head, rows) {
        ("none", None) => Ok(ScaleConstraint::None),
        ("m1", None) => Ok(ScaleConstraint::M1),
        ("m2", None) => Ok(ScaleConstraint::M2 { group_rows: 1 }),
        ("m2", Some(r)) => {
            let group_rows: usize = r
                .parse()
                .map_err(|_| Error::spec(full, format!("bad M2 row count `{r}`")))?;
            if group_rows == 0 {
                return Err(Error::spec(full, "M2 row count must be positive"));
            }
            Ok(ScaleConstraint::M2 { group_rows })
        }
        _ => Err(Error::spec(full, format!("unknown scale constraint `{head}`"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct QuantSpec {
    pub format: NumberFormat,
    pub granularity: Granularity,
    pub scale_constraint: ScaleConstraint,
}

impl QuantSpec {
    pub fn int(bits: u8, symmetric: bool, granularity: Granularity) -> Result<Self> {
        Self::new(
            NumberFormat::Int { bits, symmetric },
            granularity,
            ScaleConstraint::None,
        )
    }

    pub fn fp(format: MiniFloatFormat, granularity: Granularity) -> Result<Self> {
        Self::new(NumberFormat::Fp(format), granularity, ScaleConstraint::None)
    }

    pub fn new(format: NumberFormat, granularity: Granularity, scale_constraint: ScaleConstraint) -> Result<Self> {
        let spec = Self {
            format,
            granularity,
            scale_constraint,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_constraint(mut self, scale_constraint: ScaleConstraint) -> Result<Self> {
        self.scale_constraint = scale_constraint;
        self.validate()?;
        Ok(self)
    }

    pub fn bits(&self) -> u8 {
        self.format.bits()
    }

    pub fn family(&self) -> Family {
        self.format.family()
    }

    pub fn validate(&self) -> Result<()> {
        let name = self.to_string();
        match self.format {
            NumberFormat::Int { bits, .. } => {
                if bits != 4 && bits != 8 {
                    return Err(Error::spec(name, "integer bit width must be 4 or 8"));
                }
            }
            NumberFormat::Fp(f) => {
                if f.total_bits() != 4 && f.total_bits() != 8 {
                    return Err(Error::spec(name, "minifloat must be a 4- or 8-bit layout"));
                }
            }
        }
        if let Granularity::PerGroup(0) = self.granularity {
            return Err(Error::spec(name, "group size must be at least 1"));
        }
        if self.format.is_asymmetric() && !self.scale_constraint.is_none() {
            return Err(Error::spec(
                name,
                "power-of-two scale constraints need a zero-point-free format",
            ));
        }
        Ok(())
    }
}

impl fmt::Display for QuantSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.format {
            NumberFormat::Int { bits, symmetric } => write!(f, "int{bits}:{}", if symmetric { "sym" } else { "asym" })?,
            NumberFormat::Fp(fmt) => write!(f, "fp{}:{fmt}", fmt.total_bits())?,
        }
        match self.granularity {
            Granularity::PerTensor => write!(f, ":tensor")?,
            Granularity::PerToken => write!(f, ":token")?,
            Granularity::PerGroup(n) => write!(f, ":group{n}")?,
        }
        match self.scale_constraint {
            ScaleConstraint::None => Ok(()),
            c => write!(f, ":{c}"),
        }
    }
}

impl FromStr for QuantSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let tokens: Vec<&str> = lower.split(':').collect();
        if tokens.len() < 3 {
            return Err(Error::spec(
                s,
                "expected <family><bits>:<sym|asym|format>:<granularity>[:<constraint>]",
            ));
        }
        let format = if let Some(b) = tokens[0].strip_prefix("int") {
            let bits: u8 = b.parse().map_err(|_| Error::spec(s, format!("bad bit width `{b}`")))?;
            let symmetric = match tokens[1] {
                "sym" => true,
                "asym" => false,
                other => return Err(Error::spec(s, format!("expected sym or asym, got `{other}`"))),
            };
            NumberFormat::Int { bits, symmetric }
        } else if let Some(b) = tokens[0].strip_prefix("fp") {
            let bits: u8 = b.parse().map_err(|_| Error::spec(s, format!("bad bit width `{b}`")))?;
            let fmt: MiniFloatFormat = tokens[1].parse()?;
            if fmt.total_bits() != bits {
                return Err(Error::spec(
                    s,
                    format!("{fmt} is a {}-bit format, not fp{bits}", fmt.total_bits()),
                ));
            }
            NumberFormat::Fp(fmt)
        } else {
            return Err(Error::spec(s, format!("unknown family `{}`", tokens[0])));
        };
        let granularity = match tokens[2] {
            "tensor" => Granularity::PerTensor,
            "token" => Granularity::PerToken,
            g => {
                let n = g
                    .strip_prefix("group")
                    .and_then(|n| n.parse::<usize>().ok())
                    .ok_or_else(|| Error::spec(s, format!("bad granularity `{g}`")))?;
                Granularity::PerGroup(n)
            }
        };
        let scale_constraint = match tokens.len() {
            3 => ScaleConstraint::None,
            4 => parse_constraint(&lower, tokens[3], None)?,
            5 => parse_constraint(&lower, tokens[3], Some(tokens[4]))?,
            _ => return Err(Error::spec(s, "too many tokens")),
        };
        let spec = QuantSpec {
            format,
            granularity,
            scale_constraint,
        };
        spec.validate().map_err(|e| match e {
            Error::InvalidSpec { reason, .. } => Error::spec(s, reason),
            other => other,
        })?;
        Ok(spec)
    }
}

impl Serialize for QuantSpec {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for QuantSpec {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_canonical_strings() {
        for s in [
            "int8:asym:token",
            "int8:sym:token",
            "int4:sym:group32",
            "fp4:e2m1:group256:m2:1",
            "fp4:e2m1:group256:m1",
            "fp8:e4m3:tensor",
            "fp8:e5m2:group128",
            "fp4:e3m0:group256",
        ] {
            let spec: QuantSpec = s.parse().unwrap();
            assert_eq!(spec.to_string(), s);
        }
    }

    #[test]
    fn m2_defaults_to_one_row() {
        let spec: QuantSpec = "fp4:e2m1:group256:m2".parse().unwrap();
        assert_eq!(spec.scale_constraint, ScaleConstraint::M2 { group_rows: 1 });
        assert_eq!(
            "m2:4".parse::<ScaleConstraint>().unwrap(),
            ScaleConstraint::M2 { group_rows: 4 }
        );
    }

    #[test]
    fn rejects_mismatched_or_incomplete_recipes() {
        for s in [
            "int8",
            "int8:sym",
            "int6:sym:tensor",
            "fp8:e2m1:tensor",
            "fp4:e4m3:tensor",
            "int8:asym:group0",
            "int8:asym:tensor:m1",
            "int8:sym:rows",
            "fp4:e2m1:group256:m3",
            "fp4:e2m1:group256:m2:0",
            "bf16:sym:tensor",
        ] {
            assert!(s.parse::<QuantSpec>().is_err(), "{s} should be rejected");
        }
    }

    #[test]
    fn serde_uses_string_form() {
        let spec: QuantSpec = "fp4:e2m1:group256:m2:1".parse().unwrap();
        let json = serde_json::to_string(&spec).unwrap();
        assert_eq!(json, "\"fp4:e2m1:group256:m2:1\"");
        let back: QuantSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, spec);
    }
}
