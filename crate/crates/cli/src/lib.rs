//! Sweep runner behind the `subgfn` binary: resolves a run matrix, trains
//! every cell, and writes CSV metrics, SVG charts and a manifest.

pub mod config;
pub mod output;
pub mod runner;

pub use config::{parse_config, Args, Cell, RunMatrix};
pub use output::{write_outputs, CsvRow, CSV_HEADER};
pub use runner::{run_experiment, CellOutcome};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Usage(clap::Error),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(path: impl Into<std::path::PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status: 2 for configuration problems, 3 for I/O.
    /// Help and version requests exit 0.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(e) if !e.use_stderr() => 0,
            CliError::Usage(_) | CliError::Config(_) => 2,
            CliError::Io { .. } => 3,
        }
    }
}
