use std::fmt;

use made_core::Error;

/// A failed command, classified by exit status.
#[derive(Debug)]
pub enum Failure {
    /// Bad invocation: missing inputs, inconsistent flags. Exit 2.
    Usage(String),
    /// Inputs or configuration rejected by a module. Exit 3.
    Validation(Error),
    /// Something went wrong while doing the work. Exit 4.
    Runtime(Error),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Validation(_) => 3,
            Failure::Runtime(_) => 4,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Schema(_)
            | Error::Encoding(_)
            | Error::Alignment { .. }
            | Error::Argument(_)
            | Error::Lookup(_)
            | Error::Config(_)
            | Error::Shape(_)
            | Error::Parse { .. } => Failure::Validation(e),
            Error::Numeric(_)
            | Error::Sampling(_)
            | Error::Mining(_)
            | Error::Protocol(_)
            | Error::Checkpoint(_)
            | Error::Io { .. }
            | Error::Image { .. } => Failure::Runtime(e),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(msg) => write!(f, "{msg}"),
            Failure::Validation(e) | Failure::Runtime(e) => write!(f, "{e}"),
        }
    }
}
