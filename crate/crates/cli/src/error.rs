use std::path::PathBuf;

use thiserror::Error;

/// Process exit codes, one per error class.
pub mod exit {
    pub const OK: u8 = 0;
    pub const OTHER: u8 = 1;
    pub const USAGE: u8 = 2;
    pub const MISSING_ARTIFACT: u8 = 3;
    pub const INVALID_CONFIG: u8 = 4;
    pub const DIVERGED: u8 = 5;
    pub const EXISTS: u8 = 6;
    pub const CORRUPT_ARTIFACT: u8 = 7;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0} already exists; pass --force to overwrite")]
    Exists(PathBuf),

    #[error("config {path}: {message}")]
    Config { path: PathBuf, message: String },

    #[error("dataset at {0} was generated with a different data config than the run expects")]
    DatasetMismatch(PathBuf),

    #[error(transparent)]
    Core(#[from] nucseg::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Exists(_) => exit::EXISTS,
            CliError::Config { .. } | CliError::DatasetMismatch(_) => exit::INVALID_CONFIG,
            CliError::Core(e) => core_exit_code(e),
        }
    }
}

pub fn core_exit_code(e: &nucseg::Error) -> u8 {
    use nucseg::Error as E;
    match e {
        E::MissingArtifact(_) => exit::MISSING_ARTIFACT,
        E::InvalidArgument(_) | E::OverDense { .. } => exit::INVALID_CONFIG,
        E::Diverged { .. } => exit::DIVERGED,
        E::Checkpoint(_) | E::Png(_) | E::Json(_) => exit::CORRUPT_ARTIFACT,
        _ => exit::OTHER,
    }
}

/// Exit code for an error chain: the first classified cause wins.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CliError>() {
            return e.exit_code();
        }
        if let Some(e) = cause.downcast_ref::<nucseg::Error>() {
            return core_exit_code(e);
        }
    }
    exit::OTHER
}
