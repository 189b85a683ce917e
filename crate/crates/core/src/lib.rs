//! Post-training quantization toolkit.
//!
//! Integer and minifloat (FP8/FP4) quantizers for weights and activations, a
//! second-order column-wise weight solver, low-rank error compensation, and
//! power-of-two scale constraints that turn the FP4 to FP8 cast into an
//! exponent shift.

pub mod analysis;
pub mod cli;
pub mod error;
pub mod gptq;
pub mod lorc;
pub mod minifloat;
pub mod quant;
pub mod scale_cast;
pub mod spec;
pub mod tensor;
pub mod tensor_io;

pub use analysis::{compare, gen_synthetic, summarize, Comparison, DistributionReport, ErrorReport, SyntheticKind};
pub use error::{Error, Result};
pub use gptq::{build_hessian, gptq_quantize, proxy_loss, rtn_baseline, CalibrationSet, HessianState};
pub use lorc::{apply_lorc, error_matrix, lorc_factorize, LorcFactors, SvdMethod};
pub use minifloat::{MiniFloatCode, MiniFloatFormat, NanPolicy};
pub use quant::{
    dequantize, quantize, quantize_activations_tokenwise, quantize_fp, quantize_int, GroupLayout, GroupParams,
    QuantizedTensor,
};
pub use scale_cast::{cast_group_to_fp8, constrain_m1, constrain_m2, CastReport, ConstrainedScales};
pub use spec::{Family, Granularity, NumberFormat, QuantSpec, ScaleConstraint};
pub use tensor::Tensor;
