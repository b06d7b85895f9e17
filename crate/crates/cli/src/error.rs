use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] hscorr::Error),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot write output: {0}")]
    Output(String),
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Output(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Output(e.to_string())
    }
}

/// Process exit status of a finished command.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitStatus {
    Success,
    CheckFailed,
    Usage,
    PathologyBudget,
}

impl ExitStatus {
    pub fn code(self) -> u8 {
        match self {
            ExitStatus::Success => 0,
            ExitStatus::CheckFailed => 1,
            ExitStatus::Usage => 2,
            ExitStatus::PathologyBudget => 3,
        }
    }

    pub fn from_checks(all_passed: bool) -> Self {
        if all_passed {
            ExitStatus::Success
        } else {
            ExitStatus::CheckFailed
        }
    }
}

impl CliError {
    pub fn exit_status(&self) -> ExitStatus {
        use hscorr::Error as E;
        match self {
            CliError::Core(E::PathologyBudget { .. } | E::Runaway { .. } | E::Pathology { .. }) => ExitStatus::PathologyBudget,
            _ => ExitStatus::Usage,
        }
    }
}
