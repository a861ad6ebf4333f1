//! `vcsl` command-line driver: configuration, checkpoints, metrics and the
//! subcommands that tie the training stages, probes and checks together.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod commands;
pub mod config;

use std::path::{Path, PathBuf};

pub use commands::{run_command, run_with};
pub use config::RunConfig;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const FAILURE: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const PRECONDITION: i32 = 3;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config key `{pointer}`: {message}")]
    Schema { pointer: String, message: String },
    #[error("{0}")]
    Prerequisite(String),
    #[error("output directory {0} is locked by another run (remove the lock file if that run is gone)")]
    Locked(PathBuf),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("gradient check failed for {0}")]
    GradCheck(String),
    #[error(transparent)]
    Core(vcsl_core::Error),
}

impl From<vcsl_core::Error> for CliError {
    fn from(e: vcsl_core::Error) -> Self {
        match e {
            vcsl_core::Error::Prerequisite(m) => CliError::Prerequisite(m),
            other => CliError::Core(other),
        }
    }
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), message: e.to_string() }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Schema { .. } => "schema",
            CliError::Prerequisite(_) => "prerequisite",
            CliError::Locked(_) => "locked",
            CliError::Checkpoint(_) => "checkpoint",
            CliError::Io { .. } => "io",
            CliError::GradCheck(_) => "grad_check",
            CliError::Core(vcsl_core::Error::Config(_)) => "config",
            CliError::Core(_) => "runtime",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => exit::USAGE,
            CliError::Schema { .. } | CliError::Prerequisite(_) | CliError::Locked(_) => exit::PRECONDITION,
            CliError::Core(vcsl_core::Error::Config(_)) => exit::PRECONDITION,
            _ => exit::FAILURE,
        }
    }

    /// One-line JSON rendering for stderr.
    pub fn to_json_line(&self) -> String {
        let mut obj =
            serde_json::json!({ "error": self.kind(), "exit": self.exit_code(), "message": self.to_string() });
        if let CliError::Schema { pointer, .. } = self {
            obj["pointer"] = serde_json::Value::String(pointer.clone());
        }
        obj.to_string()
    }
}
