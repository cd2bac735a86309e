//! Contextual dropout: input-dependent dropout masks trained by variational
//! inference.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense `f64` tensors, a reverse-mode tape, seeded streams.
//! - [`dropout`]: mask distributions, encoder heads, broadcast rules, KL.
//! - [`models`]: the MLP classifier with configurable dropout sites.
//! - [`estimators`]: ELBO, ARM / REINFORCE / reparameterization gradients,
//!   Adam and an exhaustive-enumeration oracle.
//! - [`uncertainty`]: t-tests, certainty verdicts, PAvPU, ensembles.
//! - [`harness`]: data loading, run configuration, training and evaluation
//!   drivers, and the command-line entry points.

pub mod dropout;
pub mod error;
pub mod estimators;
pub mod harness;
pub mod models;
pub mod tensor;
pub mod uncertainty;

pub use error::{Error, Result};
pub use tensor::{Graph, ParamId, ParamStore, RngStream, StreamId, Tensor, Var};
