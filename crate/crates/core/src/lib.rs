//! Dynamic feature fusion for multi-category edge detection.
//!
//! The crate carries its own small reverse-mode autodiff engine
//! ([`autograd`]), the fusion operators and weight learners ([`fusion`]),
//! a toy residual backbone ([`model`]), the maximum F-measure evaluation
//! ([`eval`]) and the data, training and ablation drivers ([`harness`]).

pub mod autograd;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod harness;
pub mod io;
pub mod model;
pub mod nn;
pub mod optim;
pub mod par;
pub mod tensor;

pub use error::{Error, Result};
