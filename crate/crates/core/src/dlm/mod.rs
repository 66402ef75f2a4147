//! Masked-diffusion language model.
//!
//! A small pre-norm transformer without a causal mask, the forward noising
//! process over response tokens, the masked-token cross-entropy objective and
//! a greedy block decoder.

mod checkpoint;
mod decode;
mod model;
mod noise;

pub use checkpoint::Checkpoint;
pub use decode::{decode, decode_trace, DecodeOptions, DecodeTrace, Denoiser};
pub use model::{
    forward, AttentionCapture, ForwardOutput, HeadCapture, LayerParams, Model, ModelConfig,
    ModelParams, Params,
};
pub use noise::{apply_forward_masking, dlm_sft_loss, mask_at_level, NoisedSequence};
