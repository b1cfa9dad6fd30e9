use std::path::{Path, PathBuf};

use mmq_core::dataio::Modality;
use serde::Serialize;

use crate::error::{CliError, CliResult};

/// File locations inside a run directory. Every path is relative to `root`.
#[derive(Debug, Clone)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunLayout { root: root.into() }
    }

    pub fn abs(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.root.join(rel)
    }

    pub fn interactions() -> PathBuf {
        PathBuf::from("data/interactions.jsonl")
    }

    pub fn table(m: Modality) -> PathBuf {
        PathBuf::from(format!("data/table_{m}.mmqe"))
    }

    pub fn stats() -> PathBuf {
        PathBuf::from("data/stats.json")
    }

    pub fn quantizer_dir(recon: &str) -> PathBuf {
        PathBuf::from("quantizer").join(recon)
    }

    pub fn rec_dir(init: &str) -> PathBuf {
        PathBuf::from("rec").join(init)
    }

    pub fn diagnostics_dir() -> PathBuf {
        PathBuf::from("diagnostics")
    }

    pub fn ensure_dir(&self, rel: impl AsRef<Path>) -> CliResult<()> {
        let p = self.abs(rel);
        std::fs::create_dir_all(&p).map_err(|e| CliError::io(p, e))
    }

    pub fn write(&self, rel: impl AsRef<Path>, contents: impl AsRef<[u8]>) -> CliResult<()> {
        let p = self.abs(rel);
        std::fs::write(&p, contents).map_err(|e| CliError::io(p, e))
    }

    pub fn write_json<T: Serialize>(&self, rel: impl AsRef<Path>, value: &T) -> CliResult<()> {
        self.write(rel, serde_json::to_string_pretty(value)? + "\n")
    }

    pub fn read_json<T: serde::de::DeserializeOwned>(&self, rel: impl AsRef<Path>) -> CliResult<T> {
        let p = self.abs(rel);
        let text = std::fs::read_to_string(&p).map_err(|e| CliError::io(&p, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Sorted names of the sub-directories of `rel`, empty when absent.
    pub fn subdirs(&self, rel: impl AsRef<Path>) -> Vec<String> {
        let Ok(entries) = std::fs::read_dir(self.abs(rel)) else {
            return Vec::new();
        };
        let mut names: Vec<String> = entries
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .filter_map(|e| e.file_name().into_string().ok())
            .collect();
        names.sort();
        names
    }
}
