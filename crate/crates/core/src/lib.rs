//! Bayesian neural network robustness benchmark, desk scale.
//!
//! The crate trains the same convolutional architecture three ways — an Adam
//! point estimate, a Langevin-dynamics posterior ensemble, and a distilled
//! student — and evaluates all of them against FGSM and PGD l-infinity
//! attacks, including a constant-memory streaming attack that re-materializes
//! every ensemble member from a stored seed instead of from disk.

pub mod attacks;
pub mod data;
pub mod distill;
pub mod ensemble;
pub mod error;
pub mod fdiff;
pub mod io;
pub mod losses;
pub mod nn;
pub mod optimizer;
pub mod rng;
pub mod sampler;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Elem, Tensor};
