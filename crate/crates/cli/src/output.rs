//! Provenance and the JSON-lines writer.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::CliError;

/// Identifies the run that produced a record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Provenance {
    pub seed: u64,
    pub config_hash: String,
    pub version: String,
}

impl Provenance {
    /// Hashes the canonical JSON form of the resolved `config`.
    pub fn new<T: Serialize>(seed: u64, config: &T) -> Result<Self, CliError> {
        let canonical = serde_json::to_vec(config)?;
        Ok(Provenance {
            seed,
            config_hash: hex::encode(Sha256::digest(&canonical)),
            version: version_string(),
        })
    }
}

pub fn version_string() -> String {
    format!("hscorr {} cli {}", hscorr::VERSION, env!("CARGO_PKG_VERSION"))
}

/// Merges the provenance fields into the top level of `body`.
pub fn with_provenance<T: Serialize>(provenance: &Provenance, body: &T) -> Result<Value, CliError> {
    let mut map = match serde_json::to_value(body)? {
        Value::Object(map) => map,
        other => {
            let mut map = Map::new();
            map.insert("value".into(), other);
            map
        }
    };
    map.insert("seed".into(), provenance.seed.into());
    map.insert("config_hash".into(), provenance.config_hash.clone().into());
    map.insert("version".into(), provenance.version.clone().into());
    Ok(Value::Object(map))
}

pub(crate) fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|source| CliError::Io {
        path: dir.to_path_buf(),
        source,
    })
}

pub(crate) fn create_file(path: &Path) -> Result<File, CliError> {
    File::create(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// One JSON object per line, each stamped with the same provenance.
pub struct JsonLines {
    path: PathBuf,
    writer: BufWriter<File>,
    provenance: Provenance,
}

impl JsonLines {
    pub fn create(path: PathBuf, provenance: Provenance) -> Result<Self, CliError> {
        let writer = BufWriter::new(create_file(&path)?);
        Ok(JsonLines { path, writer, provenance })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<(), CliError> {
        let line = serde_json::to_string(&with_provenance(&self.provenance, record)?)?;
        writeln!(self.writer, "{line}").map_err(|source| self.io(source))
    }

    pub fn finish(mut self) -> Result<PathBuf, CliError> {
        self.writer.flush().map_err(|source| self.io(source))?;
        Ok(self.path)
    }

    fn io(&self, source: std::io::Error) -> CliError {
        CliError::Io {
            path: self.path.clone(),
            source,
        }
    }
}
