//! Blocked local attention with `Θ(nL)` cost, the dense oracles it is
//! checked against, reverse-mode gradients, and a small encoder-decoder
//! forecaster that can run any of the attention mechanisms.

// `!(x <= tol)` is used on purpose: NaN has to fail the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod autodiff;
pub mod bench;
pub mod data;
pub mod error;
pub mod lam;
pub mod model;
pub mod ops;
pub mod random;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Exec, Tensor};
