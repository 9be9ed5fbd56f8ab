use std::path::PathBuf;

/// Process exit codes.
pub mod exit {
    pub const SUCCESS: i32 = 0;
    /// Invalid configuration, bad arguments or an I/O failure.
    pub const CONFIG: i32 = 2;
    /// Numeric or plan errors during a run.
    pub const RUNTIME: i32 = 3;
    pub const ORACLE_MISMATCH: i32 = 4;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("report: {0}")]
    Report(String),
    #[error(transparent)]
    Run(#[from] catome_core::Error),
    #[error("oracle check failed: {mismatches} of {instances} instances disagree")]
    OracleMismatch { mismatches: usize, instances: usize },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io { .. } | CliError::Report(_) => exit::CONFIG,
            CliError::Run(catome_core::Error::Config(_)) => exit::CONFIG,
            CliError::Run(_) => exit::RUNTIME,
            CliError::OracleMismatch { .. } => exit::ORACLE_MISMATCH,
        }
    }
}
