//! Adaptive CP-GAMP.
//!
//! Bayesian CP decomposition of incomplete, noisy tensors by generalized
//! approximate message passing, with EM learning of the per-column
//! Bernoulli-Gaussian sparsity (which selects the CP rank) and of the noise
//! power.

#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::too_many_arguments,
    clippy::excessive_precision
)]

pub mod em;
pub mod error;
pub mod experiment;
pub mod gamp;
pub mod image;
pub mod io;
pub mod observation;
pub mod prior;
pub mod quadrature;
pub mod synthetic;
pub mod tensor;

pub use error::{Error, Result};
