//! BACON dataset distillation: a small reverse-mode autodiff engine, a
//! convolutional feature network, the Bayesian matching losses, a Monte-Carlo
//! risk lab, the distillation loop and an evaluation harness.

pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod featurenet;
pub mod gradcheck;
pub mod losses;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod theory;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
