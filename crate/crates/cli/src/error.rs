use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Failures of a command, split by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad arguments, config, input files or checkpoints (exit 2).
    #[error("{0}")]
    Usage(String),
    /// Anything that goes wrong once a valid run has started (exit 1).
    #[error(transparent)]
    Runtime(#[from] anyhow::Error),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

/// Input problems found while loading are usage errors, prefixed with what
/// was being loaded.
pub fn input_err(what: impl std::fmt::Display, e: varmae::Error) -> CliError {
    CliError::Usage(format!("{what}: {e}"))
}

/// Errors from a started run.
pub fn runtime(what: impl std::fmt::Display, e: varmae::Error) -> CliError {
    CliError::Runtime(anyhow::anyhow!("{what}: {e}"))
}
