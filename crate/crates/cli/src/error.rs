use ggpm::GgpmError;
use thiserror::Error;

/// Command failure, split by exit status.
#[derive(Debug, Error, PartialEq)]
pub enum CliError {
    /// Bad configuration, data, grid or file schema.
    #[error("{0}")]
    Validation(String),
    /// Inference or optimization failed on valid inputs.
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }

    /// Prefixes the message with `context`.
    pub fn context(self, context: impl std::fmt::Display) -> Self {
        match self {
            CliError::Validation(m) => CliError::Validation(format!("{context}: {m}")),
            CliError::Numerical(m) => CliError::Numerical(format!("{context}: {m}")),
        }
    }
}

impl From<GgpmError> for CliError {
    fn from(e: GgpmError) -> Self {
        match e {
            GgpmError::Domain { .. }
            | GgpmError::Parameter(_)
            | GgpmError::DimensionMismatch { .. }
            | GgpmError::UnsupportedSampler(_)
            | GgpmError::EmptyTestSet
            | GgpmError::UnknownId(_)
            | GgpmError::Format(_) => CliError::Validation(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}
