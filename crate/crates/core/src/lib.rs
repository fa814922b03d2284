//! Convolution-like local attention for text–image diffusion transformers.
//!
//! The crate is a small laboratory around circular-window ("CLEAR") attention
//! masks:
//!
//! - [`mask`]: CLEAR, neighborhood, Swin and strided masks with popcount, rank
//!   and a portable bitmap format.
//! - [`zoo`]: exact masked attention plus linear, sigmoid, KV-compressed,
//!   agent and slot attention under one signature.
//! - [`flops`]: the `4 · ΣM · c` cost model and FLUX-scale cost tables.
//! - [`dit`]: a toy joint-attention flow-matching transformer, its CLEAR
//!   student and the distillation objective.
//! - [`parallel`]: patch-parallel inference with halo exchange and text-token
//!   patch averaging over simulated workers.
//!
//! Runnable walkthroughs live in `examples/`; the `clear-lab` binary exposes
//! the same functionality as subcommands.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod cli;
pub mod dit;
pub mod error;
pub mod exact_rank;
pub mod flops;
pub mod geometry;
pub mod mask;
pub mod parallel;
pub mod report;
pub mod rope;
pub mod tensor;
pub mod zoo;

pub use error::{LabError, Result};
pub use geometry::{ClipMode, TokenGrid};
pub use mask::{AttentionMask, MaskPattern};
pub use tensor::Matrix;
pub use dit::{Params, ToyDit};
