//! Config-driven experiments on top of [`hscorr`]: invariant suites, reduced
//! function estimates and kinetic runs, written as JSON-lines and CSV files.
//!
//! Every record carries the seed, a SHA-256 hash of the resolved configuration
//! and the tool version, so that an output file identifies the run that made it.

pub mod error;
pub mod kinetics;
pub mod output;
pub mod reduce;
pub mod verify;

pub use error::{CliError, ExitStatus};
pub use output::Provenance;

use std::path::Path;

use serde::de::DeserializeOwned;

/// Options shared by every subcommand.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub workers: usize,
    pub out: std::path::PathBuf,
}

/// Reads and parses a TOML configuration file.
pub fn load_config<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config(&text)
}

pub fn parse_config<T: DeserializeOwned>(text: &str) -> Result<T, CliError> {
    toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
}

/// The seed from the command line, or else from the file; one of them is required.
pub fn resolve_seed(flag: Option<u64>, file: Option<u64>) -> Result<u64, CliError> {
    flag.or(file)
        .ok_or_else(|| CliError::Config("a seed is required, either in the config or via --seed".into()))
}

pub(crate) fn require_positive(name: &str, value: f64) -> Result<(), CliError> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{name} must be positive, got {value}")))
    }
}
