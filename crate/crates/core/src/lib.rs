//! Parameter-free cross-attention fusion of vision features into a frozen
//! decoder-only language model.

pub mod data;
pub mod error;
pub mod flops;
pub mod fusion;
pub mod gradcheck;
pub mod harness;
pub mod io;
pub mod model;
pub mod prompt;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use fusion::{
    adaptive_mask, embed_visual, fuse, param_free_xattn, standard_xattn, DropDecision,
    FusionDims, FusionGrads, FusionHyper, FusionParams, StandardXAttnParams,
};
pub use tensor::{Activation, PoolKind, Scalar, Tensor};
