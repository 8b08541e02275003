//! Quantizers, the quantized linear layer and whole-model quantization.

mod eval;
mod gptq;
mod linear;
mod quantize;
mod rtn;
mod scheme;

pub use eval::{eval_perplexity, quant_error, quant_error_bound, Quantizer};
pub use gptq::{
    clip_search, dequantize_weight, gptq_quantize, gptq_quantize_damped, rtn_quantize_weight,
    weighted_error, GPTQ_DAMP,
};
pub use linear::{int_gemm, quantized_matmul, BranchFactors, LinearParts, QuadLinear, WeightBody};
pub use quantize::{layer_errors, mean_layer_error, quantize_model, LayerError};
pub use rtn::{dequantize, fake_quant_rows, rtn_quantize_rows, Bits, QuantizedTensor};
pub use scheme::{ActBits, QuantScheme, DEFAULT_ACT_CLIP, DEFAULT_WEIGHT_CLIP_GRID};
