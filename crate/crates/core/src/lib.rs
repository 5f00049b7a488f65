//! Hierarchical subspace latent flow matching on a small reverse-mode
//! autodiff engine, with a synthetic audio-visual world for verification.

pub mod archive;
pub mod backbone;
pub mod commands;
pub mod config;
pub mod error;
pub mod flow;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod world;

pub use error::{Error, Result};
pub use tensor::{Activation, Precision, Tape, Tensor, Var};
