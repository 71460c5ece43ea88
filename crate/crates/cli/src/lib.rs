//! Configuration-driven experiments: data generation, continual training,
//! evaluation and the component ablation.

pub mod commands;
pub mod config;
pub mod datasets;
pub mod plots;

pub use commands::{cmd_ablate, cmd_eval, cmd_generate, cmd_train};
pub use config::{AblationFlags, ExperimentConfig, Overrides};
