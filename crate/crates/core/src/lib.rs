//! Compressed-context chunked video diffusion at desk scale.
//!
//! The crate covers history compression for autoregressive chunk generation
//! (a per-age patchify ladder plus a channel-compressed linear-attention
//! branch), a small diffusion transformer, rectified-flow training,
//! score-difference distillation with self-generated context, a separable
//! blur operator with pseudoinverse projections, and the keyboard/camera
//! action grammar used to condition generation.

pub mod action;
pub mod attention;
pub mod autograd;
pub mod dit;
pub mod error;
pub mod latent;
pub mod nullspace;
pub mod patchify;
pub mod stream;
pub mod tensor;
pub mod text;
pub mod training;
pub mod tscm;

pub use error::{Error, Result};
pub use tensor::Tensor;
