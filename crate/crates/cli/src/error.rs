use std::path::PathBuf;

use thiserror::Error;

/// Process exit status for a successful command.
pub const EXIT_OK: i32 = 0;
/// Bad flags, bad configuration, missing inputs.
pub const EXIT_USAGE: i32 = 1;
/// Non-finite values or other failures while running.
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("invalid configuration field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("cannot parse {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error(transparent)]
    Core(#[from] biva::Error),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("cannot write image: {0}")]
    Image(#[from] image::ImageError),

    #[error("cannot write table: {0}")]
    Csv(#[from] csv::Error),

    #[error("cannot serialize: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        CliError::Config { field: field.into(), reason: reason.into() }
    }

    pub fn exit_code(&self) -> i32 {
        use biva::Error as E;
        match self {
            CliError::Usage(_) | CliError::Config { .. } | CliError::Parse { .. } => EXIT_USAGE,
            CliError::Core(e) => match e {
                E::Numerical(_) | E::Io(_) | E::Json(_) => EXIT_RUNTIME,
                E::Shape(_)
                | E::InvalidValue(_)
                | E::Config { .. }
                | E::Data { .. }
                | E::Checksum { .. }
                | E::Checkpoint(_)
                | E::Model(_) => EXIT_USAGE,
            },
            CliError::Io(_) | CliError::Image(_) | CliError::Csv(_) | CliError::Json(_) => EXIT_RUNTIME,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numerical_failures_map_to_two() {
        assert_eq!(CliError::from(biva::Error::Numerical("nan".into())).exit_code(), EXIT_RUNTIME);
        assert_eq!(CliError::from(biva::Error::Checkpoint("missing".into())).exit_code(), EXIT_USAGE);
        assert_eq!(CliError::config("model.num_layers", "must be at least 1").exit_code(), EXIT_USAGE);
    }
}
