//! Minimal reverse-mode differentiation engine: tensors, a recording tape
//! with the handful of operators the networks use, Adam, and a
//! finite-difference gradient checker.

pub mod adam;
pub mod gradcheck;
pub mod kernels;
pub mod tape;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{GradCheck, GradCheckReport};
pub use kernels::{Padding, SampleBounds};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
