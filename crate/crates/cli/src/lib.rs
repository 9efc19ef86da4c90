//! Experiment orchestration for the `simoe` command. Parses configuration,
//! expands the sweep into runs and writes their artifacts.

pub mod config;
pub mod experiment;

use std::path::PathBuf;

use thiserror::Error;

pub use config::{parse_config, ExperimentManifest, RunSpec, StreamSource};
pub use experiment::{auc_probe, simulate, Overrides};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] simoe::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}

pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");
