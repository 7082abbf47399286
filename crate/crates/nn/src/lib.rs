//! A compact reverse-mode differentiation engine for the 2D convolutional
//! networks used by `dgmnet`: NCHW `f32` tensors, im2col convolutions,
//! 2×2 transposed convolutions, batch normalization with running
//! statistics, and an Adam optimizer. Parameters live in a named
//! [`ParamStore`] so that networks can be frozen, hashed, and
//! checkpointed by name.

pub mod error;
pub mod graph;
pub mod kernels;
pub mod optim;
pub mod params;

pub use error::NnError;
pub use graph::{sigmoid, Gradients, Graph, Mode, Var};
pub use optim::{Adam, AdamConfig, AdamState};
pub use params::{mix64, stream_seed, Init, Param, ParamId, ParamStore, Role};
