use thiserror::Error;

/// Failures of a CLI run, each mapped to its own exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error at line {line}, column {column:?}: {message}")]
    Parse { line: u64, column: String, message: String },

    #[error("estimation error: {context}: {source}")]
    Estimation {
        context: String,
        #[source]
        source: threshold_iv::Error,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Io(_) => 1,
            CliError::Config(_) => 2,
            CliError::Parse { .. } => 3,
            CliError::Estimation { .. } => 4,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Attach context to library errors.
pub trait Context<T> {
    fn context(self, what: &str) -> CliResult<T>;
}

impl<T> Context<T> for threshold_iv::Result<T> {
    fn context(self, what: &str) -> CliResult<T> {
        self.map_err(|source| CliError::Estimation { context: what.to_string(), source })
    }
}
