//! Continual video prediction with a task-conditioned mixture world model,
//! an initial-frame generator for replay, and test-time task inference.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gaussian;
pub mod generator;
pub mod gradcheck;
pub mod inference;
pub mod metrics;
mod nn;
pub mod replay;
pub mod world_model;

pub use checkpoint::Checkpoint;
pub use cpl_tensor::{Scalar, Tensor};
pub use error::{CplError, Result};
pub use generator::{FrameGenerator, GeneratorConfig};
pub use metrics::EvalMatrix;
pub use world_model::{WorldModel, WorldModelConfig};

pub type WorldModel32 = WorldModel<f32>;
pub type WorldModel64 = WorldModel<f64>;
pub type FrameGenerator32 = FrameGenerator<f32>;
pub type FrameGenerator64 = FrameGenerator<f64>;
