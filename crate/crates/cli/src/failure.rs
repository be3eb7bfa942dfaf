use std::fmt;
use std::process::ExitCode;

use promptst::error::{CheckpointError, DataError, Error, TrainError};

/// A command failure with its exit status.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(String),
    Mismatch(String),
}

impl Failure {
    pub fn code(&self) -> ExitCode {
        ExitCode::from(match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Mismatch(_) => 3,
        })
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (kind, message) = match self {
            Failure::Usage(m) => ("usage", m),
            Failure::Data(m) => ("data", m),
            Failure::Mismatch(m) => ("mismatch", m),
        };
        write!(
            f,
            "error ({kind}): {}",
            message.lines().next().unwrap_or_default()
        )
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let text = e.to_string();
        match e {
            Error::Data(_) | Error::Train(TrainError::EmptyDataset) => Failure::Data(text),
            Error::Checkpoint(c) => c.into(),
            Error::Tensor(_) | Error::Config(_) | Error::Train(_) => Failure::Mismatch(text),
        }
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Array { .. } => Failure::Mismatch(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}
