//! Simulation studies, resampling and output files.

pub mod bootstrap;
pub mod config;
pub mod emit;
pub mod experiment;
pub mod r2;

pub use bootstrap::{bootstrap, BootMethod, BootstrapOptions, BootstrapResult, BootstrapRow};
pub use config::{ExperimentConfig, ExperimentName, GridPoint, Method, MethodSpec, ModelConfig};
pub use emit::{emit, OutputFormat};
pub use experiment::{pooled_se, run_experiment, simulate, ExperimentResult, ReplicateRow, SummaryRow};
pub use r2::{evaluate_projection_r2, whiten, Degree};
