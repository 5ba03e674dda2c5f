//! Segment-recurrent compressive transformer whose evicted memories are kept
//! (compressed) or discarded by a policy-gradient judger.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod judger;
pub mod memory;
pub mod model;
pub mod records;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{DctError, Result};
pub use scalar::Scalar;

pub use config::{BaselineMode, JudgeMode, RunConfig};
pub use train::{evaluate, EvalReport, Phase, StepReport, Trainer};

pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
pub type Actor32 = judger::Actor<f32>;
pub type Actor64 = judger::Actor<f64>;
pub type Trainer32 = train::Trainer<f32>;
pub type Trainer64 = train::Trainer<f64>;
pub type Matrix32 = tensor::Matrix<f32>;
pub type Matrix64 = tensor::Matrix<f64>;
