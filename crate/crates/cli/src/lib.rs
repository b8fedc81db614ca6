//! Reproducible experiment runner for the `opwalk-core` diagnostics.

pub mod config;
pub mod report;
pub mod run;

pub use config::{Experiment, ExperimentConfig, RunConfig, Settings};
pub use report::{emit_plotdata, DiagnosticReport, Row};
pub use run::run_experiment;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] opwalk_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    /// Suggested fix for errors a config change can cure.
    pub fn hint(&self) -> Option<&'static str> {
        match self {
            CliError::Core(opwalk_core::Error::Geometry(_)) | CliError::Core(opwalk_core::Error::Range(_)) => {
                Some("enlarge the window: raise spatial_margin, horizon_margin or half_width")
            }
            CliError::Core(opwalk_core::Error::Capacity(_)) => {
                Some("exact enumeration is limited to small slabs: use mode = \"mc\", a smaller n, or horizon_margin = 0")
            }
            CliError::Config(_) => Some("see the example configs under configs/"),
            _ => None,
        }
    }
}
