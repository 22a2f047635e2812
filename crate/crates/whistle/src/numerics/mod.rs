//! Differentiable dense-tensor substrate: tensors, a reverse-mode tape,
//! gradient checking, and an adaptive-moment optimizer.
//!
//! Compute is 32-bit; the tape and kernels are generic over [`Real`] so the
//! gradient checker can re-run the exact same graph code in 64-bit, where
//! central differences resolve to ~1e-10 and a 1e-5 tolerance is meaningful.

mod gradcheck;
mod kernels;
mod optim;
pub mod par;
mod rng;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport, Precision};
pub use optim::{adam_step, adam_step_filtered, AdamHyper, OptimizerState};
pub use rng::Stream;
pub use tape::{Tape, Var};
pub use tensor::{ParamStore, Real, Tensor, TensorBase};
