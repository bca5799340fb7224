//! Experiment harness for the `isekf` filters: configs, metrics, CSV and SVG
//! output, and the `run` / `certify` / `sweep` commands.

pub mod commands;
pub mod config;
pub mod error;
pub mod export;
pub mod metrics;
pub mod plot;

pub use config::{parse_certify_config, parse_config, CertifyProblem, ExperimentConfig};
pub use error::{HarnessError, Result};
pub use metrics::{rmse, MetricsReport, Window};
