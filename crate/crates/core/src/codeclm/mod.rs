//! Toy codec-token language model: parameters, LoRA adapters, forward pass,
//! decoding, int8 quantization and sequence scoring.

mod decode;
pub mod lora;
mod model;
mod params;
pub mod quant;
pub mod tensor;

pub use decode::{
    decode, greedy_step, sample_step, sequence_logprob, top_k_probs, DecodeMode, DecodeOutput,
    DecodeParams, TokenSelector,
};
pub use lora::{AdapterKind, LoraAdapter, LoraFactors, Target};
pub use model::{AdapterStack, Input, Linear, Model};
pub use params::{init_params, LayerParams, ModelConfig, Parameters};
pub use quant::{dequant_matmul, QuantMatrix};
