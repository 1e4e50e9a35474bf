//! Subcommands of the `ideaforest` binary: `run`, `simulate`, `analyze`
//! and `elo`. Each returns a typed error whose [`CliError::exit_code`] is
//! the process exit status.

pub mod analyze;
pub mod config;
pub mod elo;
pub mod logs;
pub mod manifest;
pub mod plot;
pub mod run;
pub mod simulate;

use std::path::{Path, PathBuf};

use ideaforest_core::metrics::BootstrapConfig;
use thiserror::Error;

pub use analyze::{cmd_analyze, AnalyzeSummary};
pub use elo::cmd_elo;
pub use run::{cmd_run, RunOptions, RunSummary};
pub use simulate::{cmd_simulate, SimulateOptions};

pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_BACKEND_UNREACHABLE: i32 = 2;
pub const EXIT_PARTIAL: i32 = 3;
pub const EXIT_ELO_DISCONNECTED: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("backend unreachable: {0}")]
    BackendUnreachable(String),
    #[error("{failed} of {total} task runs aborted")]
    Partial { failed: usize, total: usize },
    #[error("no trajectory logs found under {0}")]
    NoLogsFound(PathBuf),
    #[error("Elo comparison graph is disconnected: {0}")]
    EloDisconnected(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::BackendUnreachable(_) => EXIT_BACKEND_UNREACHABLE,
            CliError::Partial { .. } => EXIT_PARTIAL,
            CliError::EloDisconnected(_) => EXIT_ELO_DISCONNECTED,
            CliError::Config(_) | CliError::NoLogsFound(_) | CliError::Io { .. } | CliError::Other(_) => {
                EXIT_CONFIG
            }
        }
    }

    pub(crate) fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> CliError {
        let context = context.into();
        move |source| CliError::Io { context, source }
    }
}

/// Writes `contents` next to `path` and renames it into place, so readers
/// never see a half-written file.
pub(crate) fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(CliError::io(format!("creating {}", dir.display())))?;
    }
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, contents).map_err(CliError::io(format!("writing {}", tmp.display())))?;
    std::fs::rename(&tmp, path).map_err(CliError::io(format!("renaming to {}", path.display())))
}

/// Bootstrap settings shared by the reporting subcommands.
pub fn bootstrap_config(resamples: usize, confidence: f64, seed: u64) -> Result<BootstrapConfig, CliError> {
    if resamples == 0 {
        return Err(CliError::Config("--resamples must be at least 1".into()));
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(CliError::Config(format!("--confidence {confidence} must be in (0, 1)")));
    }
    Ok(BootstrapConfig {
        n_resamples: resamples,
        confidence,
        seed,
    })
}
