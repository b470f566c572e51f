//! Minimal dense-tensor substrate with reverse-mode differentiation.
//!
//! Provides exactly what a pair of U-Net style encoder–decoders needs:
//! same-padded convolutions in two and three dimensions, max pooling,
//! nearest upsampling, channel concatenation, ReLU/sigmoid, a soft Dice loss,
//! a hook for externally defined differentiable ops, Adam, and a
//! finite-difference gradient checker.
//!
//! Graphs are generic over [`Real`]: train in `f32`, verify in `f64`.

mod error;
pub mod gradcheck;
mod graph;
mod ops;
mod optim;
mod param;
mod tensor;

pub use error::{AutodiffError, Result};
pub use gradcheck::{grad_check, grad_check_sampled, relative_error, GradCheckReport};
pub use graph::{CustomOp, Graph, Var};
pub use optim::Adam;
pub use param::{AdamState, Initializer, ParamId, ParamSet, Parameter};
pub use tensor::{Real, Tensor};
