//! Experiment harness around `defa-core`: configuration, workloads,
//! presets and reports.

pub mod config;
pub mod experiment;
pub mod report;
pub mod workload;

pub use config::{OffsetProfile, RunConfig, Switch};
pub use experiment::{run_experiment, Bundle, Preset};
