//! Experiment orchestration for the grounding benchmark.

pub mod config;
pub mod error;
pub mod experiment;
pub mod overlay;
pub mod words;

pub use config::ExperimentConfig;
pub use error::{BenchError, Result};
pub use experiment::{run_experiment, Report};
