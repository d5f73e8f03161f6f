//! Desk-scale laboratory for distilling StyleGAN2-like unconditional
//! generators: a small differentiable generator stack, closed-form latent
//! direction discovery, relational distillation losses, gradient-conflict
//! diagnostics, and evaluation metrics (desk FID, PPL, projection PSNR).

pub mod error;
pub mod gradcheck;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Var;
