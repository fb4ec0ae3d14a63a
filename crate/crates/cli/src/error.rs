use std::fmt;

/// Process exit codes.
pub mod exit {
    pub const SUCCESS: u8 = 0;
    /// I/O failure, or a check that ran but did not pass.
    pub const FAILURE: u8 = 1;
    /// Bad configuration, schema or input data.
    pub const VALIDATION: u8 = 2;
    /// Positivity or common-support failure.
    pub const POSITIVITY: u8 = 3;
    /// A nuisance model did not converge (or too many bootstrap refits failed).
    pub const CONVERGENCE: u8 = 4;
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Io(String),
    Input(String),
    Core(equidecomp::Error),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Input(_) => exit::VALIDATION,
            CliError::Io(_) => exit::FAILURE,
            CliError::Core(e) if e.is_validation() => exit::VALIDATION,
            CliError::Core(e) if e.is_positivity() => exit::POSITIVITY,
            CliError::Core(e) if e.is_convergence() => exit::CONVERGENCE,
            CliError::Core(equidecomp::Error::Bootstrap { .. }) => exit::CONVERGENCE,
            CliError::Core(equidecomp::Error::InfeasibleCohort(_)) => exit::VALIDATION,
            CliError::Core(_) => exit::FAILURE,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
            CliError::Input(m) => write!(f, "input error: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<equidecomp::Error> for CliError {
    fn from(e: equidecomp::Error) -> Self {
        CliError::Core(e)
    }
}
