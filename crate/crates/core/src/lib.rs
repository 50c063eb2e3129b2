//! Pluralistic image completion with a learned Gaussian-mixture latent.
//!
//! The crate is organised around a small f64 autodiff engine ([`tensor`]),
//! probability primitives ([`dist`], [`discrete`]), the mixture-of-experts
//! losses ([`moe`]), the encoder/decoder/discriminator networks ([`model`]),
//! the composite training objective ([`losses`]), a synthetic multimodal
//! corpus ([`data`]), the training loop ([`train`]), sampling-based
//! completion ([`infer`]), evaluation metrics ([`metrics`]) and standalone
//! verification suites ([`oracle`]).

pub mod error;
pub mod prng;
pub mod dist;
pub mod infer;
pub mod metrics;
pub mod losses;
pub mod model;
pub mod moe;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod discrete;
pub mod netpbm;
pub mod oracle;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use prng::Prng;
pub use tensor::{Tape, Tensor, Var};
