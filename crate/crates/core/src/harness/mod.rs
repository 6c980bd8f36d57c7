//! Experiment harness: configuration, runners, CSV reports and SVG plots.

pub mod config;
pub mod experiments;
pub mod gradsuite;
pub mod plot;
pub mod report;

pub use config::{EvalConfig, Experiment, ExperimentConfig, ModelConfig, SCHEMA_VERSION};
pub use experiments::{emit_plot, run, write_outputs};
pub use plot::{Plot, Series};
pub use report::{config_hash, meta_json, Report, Value};
