pub mod checkpoint;
pub mod config;
pub mod dc;
pub mod disparity;
pub mod engine;
pub mod error;
pub mod io;
pub mod metrics;
pub mod net;
pub mod pipeline;
pub mod scalar;
pub mod selftest;
pub mod synthetic;

pub use engine::{AdamConfig, AdamState, GradCheck, Padding, SampleBounds, Tape, Tensor, Var};
pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
