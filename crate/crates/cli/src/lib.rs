//! Configuration, presets and run orchestration behind the `covsteer`
//! binary.

use std::path::Path;

use thiserror::Error;

pub mod config;
pub mod presets;
pub mod report;
pub mod run;

pub use config::{ConstraintKind, Overrides, ProblemConfig};
pub use presets::{preset, PresetName};
pub use report::RunReport;
pub use run::{run, Command, RunOptions};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Parse(String),

    #[error(transparent)]
    Core(#[from] covsteer::Error),

    #[error("I/O error on {path}: {source}")]
    Io { path: String, source: std::io::Error },

    #[error("output error: {0}")]
    Output(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// 0 success, 1 I/O, 2 infeasible, 3 bad input, 4 solver failure.
    pub fn exit_code(&self) -> i32 {
        use covsteer::Error as E;
        match self {
            CliError::Io { .. } | CliError::Output(_) => 1,
            CliError::Parse(_) => 3,
            CliError::Core(e) => match e {
                E::Infeasible(_) | E::InfeasibleMean { .. } => 2,
                E::Solver(_) | E::Logic(_) => 4,
                _ => 3,
            },
        }
    }
}
