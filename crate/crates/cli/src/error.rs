/// Failure of a subcommand, classified by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, unknown config keys, malformed values.
    #[error("{0}")]
    Usage(String),
    /// Missing or unwritable paths, existing runs, absent checkpoints.
    #[error("{0}")]
    Env(String),
    #[error(transparent)]
    Core(#[from] lvqa_core::Error),
}

impl CliError {
    /// 0 ok, 1 usage, 2 environment or data, 3 numeric failure.
    pub fn exit_code(&self) -> u8 {
        use lvqa_core::Error as E;
        match self {
            CliError::Usage(_) => 1,
            CliError::Env(_) => 2,
            CliError::Core(E::Numeric(_)) => 3,
            CliError::Core(E::Config(_) | E::InvalidArgument(_)) => 1,
            CliError::Core(_) => 2,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
