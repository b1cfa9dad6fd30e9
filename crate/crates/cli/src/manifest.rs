use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::hex;
use crate::error::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the run directory.
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub config_hash: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub artifacts: Vec<Artifact>,
}

impl StageRecord {
    /// `(path, sha256)` pairs, the part that must repeat across identical runs.
    pub fn checksums(&self) -> Vec<(PathBuf, String)> {
        self.artifacts
            .iter()
            .map(|a| (a.path.clone(), a.sha256.clone()))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RunManifest {
    pub library_version: String,
    /// Hash of the configuration of the most recent stage.
    pub config_hash: String,
    pub stages: BTreeMap<String, StageRecord>,
}

pub fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn sha256_file(path: &Path) -> CliResult<(String, u64)> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok((hex(&Sha256::digest(&bytes)), bytes.len() as u64))
}

impl RunManifest {
    pub fn load(run_dir: &Path) -> CliResult<Option<RunManifest>> {
        let path = run_dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        Ok(Some(serde_json::from_str(&text)?))
    }

    pub fn save(&self, run_dir: &Path) -> CliResult<()> {
        let path = run_dir.join(MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(self)? + "\n")
            .map_err(|e| CliError::io(&path, e))
    }

    /// Hashes `artifacts` and stores them as the record of `stage`.
    pub fn record(
        run_dir: &Path,
        stage: &str,
        config_hash: &str,
        started_unix: u64,
        artifacts: &[PathBuf],
    ) -> CliResult<StageRecord> {
        let mut manifest = RunManifest::load(run_dir)?.unwrap_or_default();
        if !manifest.config_hash.is_empty() && manifest.config_hash != config_hash {
            log::warn!("stage {stage} runs with a different config than the previous stage");
        }
        let mut list = Vec::with_capacity(artifacts.len());
        for rel in artifacts {
            let (sha256, bytes) = sha256_file(&run_dir.join(rel))?;
            list.push(Artifact {
                path: rel.clone(),
                sha256,
                bytes,
            });
        }
        let record = StageRecord {
            config_hash: config_hash.to_string(),
            started_unix,
            finished_unix: now_unix(),
            artifacts: list,
        };
        manifest.library_version = env!("CARGO_PKG_VERSION").to_string();
        manifest.config_hash = config_hash.to_string();
        manifest.stages.insert(stage.to_string(), record.clone());
        manifest.save(run_dir)?;
        Ok(record)
    }

    /// Artifacts referenced by the manifest that are not on disk.
    pub fn missing_artifacts(&self, run_dir: &Path) -> Vec<PathBuf> {
        self.stages
            .values()
            .flat_map(|s| &s.artifacts)
            .filter(|a| !run_dir.join(&a.path).is_file())
            .map(|a| a.path.clone())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_accumulate_per_stage() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.txt"), "abc").unwrap();
        RunManifest::record(dir.path(), "one", "h", 0, &["a.txt".into()]).unwrap();
        RunManifest::record(dir.path(), "two", "h", 0, &[]).unwrap();
        let m = RunManifest::load(dir.path()).unwrap().unwrap();
        assert_eq!(m.stages.len(), 2);
        let a = &m.stages["one"].artifacts[0];
        assert_eq!(
            a.sha256,
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert_eq!(a.bytes, 3);
        assert!(m.missing_artifacts(dir.path()).is_empty());
        std::fs::remove_file(dir.path().join("a.txt")).unwrap();
        assert_eq!(
            m.missing_artifacts(dir.path()),
            vec![PathBuf::from("a.txt")]
        );
    }

    #[test]
    fn missing_file_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = RunManifest::record(dir.path(), "s", "h", 0, &["nope".into()]).unwrap_err();
        assert_eq!(err.exit_code(), 4);
    }
}
