use thiserror::Error;

/// Exit status of a successful command.
pub const EXIT_OK: i32 = 0;
/// A check ran and failed (gradient check, non-finite training).
pub const EXIT_CHECK: i32 = 1;
/// Invalid command line or configuration.
pub const EXIT_USAGE: i32 = 2;
/// Unreadable, malformed or incompatible inputs and outputs.
pub const EXIT_DATA: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage error: {0}")]
    Usage(String),
    #[error("check failed: {0}")]
    Check(String),
    #[error("data error: {0}")]
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Check(_) => EXIT_CHECK,
            CliError::Data(_) => EXIT_DATA,
        }
    }
}

impl From<hmamba::Error> for CliError {
    fn from(e: hmamba::Error) -> Self {
        use hmamba::Error as E;
        match e {
            E::InvalidArgument(_) | E::UnsupportedMode(_) => CliError::Usage(e.to_string()),
            E::NonFiniteGradient { .. } | E::NonFiniteLoss { .. } | E::Domain(_) | E::Degenerate(_) => {
                CliError::Check(e.to_string())
            }
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}
