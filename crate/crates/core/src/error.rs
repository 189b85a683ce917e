use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid minifloat format: {0}")]
    InvalidFormat(String),

    #[error("invalid quantization spec `{spec}`: {reason}")]
    InvalidSpec { spec: String, reason: String },

    #[error("non-finite input at element {index}")]
    NonFinite { index: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("corrupted quantized tensor: {0}")]
    Corrupted(String),

    #[error("Cholesky factorization failed at pivot {pivot}; calibration data is degenerate (increase damping)")]
    Factorization { pivot: usize },

    #[error("SVD did not converge")]
    SvdNonConvergence,

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic bytes (not an fpq tensor container)")]
    BadMagic,

    #[error("unsupported container version {0}")]
    UnsupportedVersion(u16),

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("dimension overflow: {0}")]
    DimensionOverflow(String),

    #[error("header schema error: {0}")]
    Schema(String),

    #[error("usage error: {0}")]
    Usage(String),
}

impl Error {
    pub(crate) fn spec(spec: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidSpec {
            spec: spec.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Usage and I/O problems versus numerical or domain failures.
    pub fn is_usage_or_io(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::BadMagic
                | Error::UnsupportedVersion(_)
                | Error::Checksum { .. }
                | Error::DimensionOverflow(_)
                | Error::Schema(_)
                | Error::InvalidSpec { .. }
                | Error::InvalidFormat(_)
                | Error::Usage(_)
        )
    }

    /// Stable machine-readable name of the error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidFormat(_) => "invalid_format",
            Error::InvalidSpec { .. } => "invalid_spec",
            Error::NonFinite { .. } => "non_finite",
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Corrupted(_) => "corrupted",
            Error::Factorization { .. } => "factorization",
            Error::SvdNonConvergence => "svd_non_convergence",
            Error::Io { .. } => "io",
            Error::BadMagic => "bad_magic",
            Error::UnsupportedVersion(_) => "unsupported_version",
            Error::Checksum { .. } => "checksum",
            Error::DimensionOverflow(_) => "dimension_overflow",
            Error::Schema(_) => "schema",
            Error::Usage(_) => "usage",
        }
    }
}
