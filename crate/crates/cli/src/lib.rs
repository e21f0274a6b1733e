//! Experiment harness: scenario configs, runs, sweeps, paired comparisons
//! and the oracle verification gate. The `iada` binary is a thin wrapper.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod compare;
pub mod config;
pub mod run;
pub mod scenario;
pub mod verify;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("{0}")]
    Library(#[from] iada::Error),

    #[error("verification failed: {0}")]
    Verify(String),

    #[error("i/o error on {path}: {detail}")]
    Io { path: std::path::PathBuf, detail: String },
}

impl CliError {
    /// 1 verification failure, 2 bad config or input, 3 numerical abort.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Verify(_) => 1,
            CliError::Config(_) | CliError::Io { .. } => 2,
            CliError::Library(e) => match e {
                iada::Error::InvalidArgument(_) | iada::Error::Csv { .. } | iada::Error::Io { .. } => 2,
                _ => 3,
            },
        }
    }

    pub(crate) fn io(path: &std::path::Path, e: impl std::fmt::Display) -> Self {
        CliError::Io { path: path.to_path_buf(), detail: e.to_string() }
    }
}
