use thiserror::Error;

/// Exit status for configuration and validation failures.
pub const EXIT_VALIDATION: i32 = 2;
/// Exit status for numerical failures.
pub const EXIT_NUMERICAL: i32 = 3;
/// Exit status for file system failures.
pub const EXIT_IO: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Model(#[from] ismoe::Error),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_VALIDATION,
            CliError::Io { .. } => EXIT_IO,
            CliError::Model(ismoe::Error::Io { .. }) => EXIT_IO,
            CliError::Model(e) if e.is_numerical() => EXIT_NUMERICAL,
            CliError::Model(_) => EXIT_VALIDATION,
        }
    }
}
