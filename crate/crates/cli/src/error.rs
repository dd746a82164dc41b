use std::fmt;

/// Everything a subcommand can fail with, mapped onto the process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad or inconsistent configuration.
    Config(String),
    /// Error raised by the library.
    Core(probembed::Error),
    /// Gradient check ran but exceeded its tolerance.
    GradCheckFailed { max_rel_error: f64, tolerance: f64 },
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

impl CliError {
    /// 1 for validation and usage problems, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        use probembed::Error as E;
        match self {
            CliError::Config(_) => EXIT_VALIDATION,
            CliError::Core(E::InvalidInput(_) | E::DimensionMismatch { .. } | E::Validation { .. }) => EXIT_VALIDATION,
            CliError::Core(E::NonFiniteLoss { .. } | E::Format { .. } | E::Truncated { .. } | E::Io { .. }) => {
                EXIT_RUNTIME
            }
            CliError::GradCheckFailed { .. } => EXIT_RUNTIME,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "config: {msg}"),
            CliError::Core(e) => e.fmt(f),
            CliError::GradCheckFailed { max_rel_error, tolerance } => {
                write!(f, "gradient check failed: max relative error {max_rel_error:.3e} >= {tolerance:.1e}")
            }
        }
    }
}

impl std::error::Error for CliError {}

impl From<probembed::Error> for CliError {
    fn from(e: probembed::Error) -> Self {
        CliError::Core(e)
    }
}
