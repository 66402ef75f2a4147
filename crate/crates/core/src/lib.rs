//! Causal concept-guided masked diffusion language modeling at desk scale.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: f64 tensors, a reverse-mode tape, gradient checking, AdamW
//! - [`orderperturb`]: the synthetic DAG reasoning corpus and its order perturbations
//! - [`concept`]: concept graphs, teacher-model extraction, graph scoring, cost
//! - [`mask`]: tokenizer, concept span location and the token-pair supervision mask
//! - [`dlm`]: the bidirectional transformer, forward masking, SFT loss, block decoder
//! - [`align`]: value-weighted attention and the alignment row losses
//! - [`harness`]: training, evaluation, attention export and run comparison
//! - [`config`]: the declarative run configuration shared by the CLI

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod align;
pub mod concept;
pub mod config;
pub mod dlm;
mod error;
pub mod harness;
pub mod mask;
pub mod numerics;
pub mod orderperturb;

pub use error::{Error, Result};
pub use numerics::{Tape, Tensor, Var};
