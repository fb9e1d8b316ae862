use std::fmt;

/// Command failures, each tied to a process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config or data (exit 2).
    Input(String),
    /// Every requested method or cell failed (exit 3).
    AllFailed(String),
    /// A result violated an invariant the library guarantees (exit 4).
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::AllFailed(_) => 3,
            CliError::Internal(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Input(m) => write!(f, "input error: {m}"),
            CliError::AllFailed(m) => write!(f, "all methods failed: {m}"),
            CliError::Internal(m) => write!(f, "internal invariant violated: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<late_balance::Error> for CliError {
    fn from(e: late_balance::Error) -> Self {
        use late_balance::Error as E;
        match e {
            E::InvalidRow { .. } | E::InvalidData(_) | E::InvalidArgument(_) | E::Csv(_) | E::Io(_) => CliError::Input(e.to_string()),
            _ => CliError::AllFailed(e.to_string()),
        }
    }
}
