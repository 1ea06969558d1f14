//! A compact CPU neural-network engine.
//!
//! Networks are sequential stacks described by [`LayerSpec`] recipes. Every
//! layer implements an explicit backward pass, so callers can obtain both
//! parameter gradients and input gradients (the latter drive
//! gradient-through-a-frozen-model losses and FGSM). Matrix products go
//! through `matrixmultiply`'s single-threaded sgemm, which keeps runs
//! bit-reproducible under a fixed seed.

pub mod checkpoint;
mod error;
mod layers;
pub mod loss;
mod network;
mod ops;
pub mod optim;
mod tensor;

pub use error::{NnError, Result};
pub use layers::{LayerSpec, Mode};
pub use network::{Grads, Network, Tape};
pub use optim::{Adam, AdamConfig};
pub use tensor::Tensor;
