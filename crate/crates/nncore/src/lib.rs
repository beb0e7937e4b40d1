//! Minimal dense tensor mathematics with reverse-mode gradients.
//!
//! Everything differentiable in the workspace is recorded on a [`Graph`]
//! built against a [`ParamSet`]. Optimizers update the set in place, and
//! [`grad_check`] verifies any graph-building closure against central
//! finite differences.

mod error;
mod scalar;
mod tensor;

pub mod checkpoint;
pub mod exec;
pub mod gradcheck;
pub mod graph;
pub mod init;
pub mod net;
pub mod ops;
pub mod optim;
pub mod params;

pub use error::{NnError, Result};
pub use exec::Exec;
pub use gradcheck::{grad_check, GradCheckReport, LossBuilder};
pub use graph::{Graph, Var};
pub use net::{forward_backward, Layer, LossHead, Sequential};
pub use ops::{cross_entropy, entropy, softmax, LOG_EPS};
pub use optim::{Algorithm, OptimState};
pub use params::{Gradients, Param, ParamSet};
pub use scalar::{gemm, Scalar};
pub use tensor::Tensor;
