//! ltc — latent tensor codec: a desk-scale, self-contained implementation of
//! hierarchical discrete-latent video compression plus causal spatiotemporal
//! autoregressive priors for clip prediction.
//!
//! The crate is organized as a library with runnable `examples/`; the `ltc`
//! binary exposes the same entry points as CLI subcommands.

pub mod codec;
mod layers;
pub mod params;
pub mod prior;
pub mod tensor;
pub mod vq;

pub use tensor::{Scalar, Tensor, TensorError};
