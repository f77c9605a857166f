//! Run bookkeeping: config hash, seeds, timings, and a checksummed list of
//! every output file.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::error::{io_err, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub name: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub config_path: String,
    pub config_hash: String,
    pub master_seed: u64,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub wall_seconds: f64,
    pub stages: Vec<StageTiming>,
    pub outputs: Vec<OutputFile>,
    /// Free-form run details (resolved quench parameters, clip fraction, ...).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub details: Option<serde_json::Value>,
}

pub fn sha256_hex_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

/// Collects stage timings and output checksums while a command runs.
pub struct ManifestBuilder {
    manifest: RunManifest,
    started: Instant,
    stage_started: Instant,
    out_dir: PathBuf,
}

impl ManifestBuilder {
    pub fn new(command: &str, config_path: &Path, out_dir: &Path) -> Self {
        ManifestBuilder {
            manifest: RunManifest {
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                command: command.to_string(),
                config_path: config_path.display().to_string(),
                config_hash: String::new(),
                master_seed: 0,
                status: "ok".into(),
                error: None,
                wall_seconds: 0.0,
                stages: Vec::new(),
                outputs: Vec::new(),
                details: None,
            },
            started: Instant::now(),
            stage_started: Instant::now(),
            out_dir: out_dir.to_path_buf(),
        }
    }

    pub fn set_config(&mut self, hash: &str, seed: u64) {
        self.manifest.config_hash = hash.to_string();
        self.manifest.master_seed = seed;
    }

    pub fn set_details(&mut self, details: serde_json::Value) {
        self.manifest.details = Some(details);
    }

    /// Close the current stage under `name` and start timing the next one.
    pub fn finish_stage(&mut self, name: &str) {
        self.manifest.stages.push(StageTiming {
            name: name.to_string(),
            seconds: self.stage_started.elapsed().as_secs_f64(),
        });
        self.stage_started = Instant::now();
    }

    /// Checksum an output file and add it to the manifest.
    pub fn record_output(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::metadata(path).map_err(|e| io_err(path, e))?.len();
        self.manifest.outputs.push(OutputFile {
            path: path
                .strip_prefix(&self.out_dir)
                .unwrap_or(path)
                .display()
                .to_string(),
            sha256: sha256_hex_file(path)?,
            bytes,
        });
        Ok(())
    }

    pub fn fail(&mut self, error: &str) {
        self.manifest.status = "failed".into();
        self.manifest.error = Some(error.to_string());
    }

    /// Write `manifest.json` into the output directory.
    pub fn write(mut self) -> Result<RunManifest> {
        self.manifest.wall_seconds = self.started.elapsed().as_secs_f64();
        let path = self.out_dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&self.manifest)?;
        std::fs::write(&path, text + "\n").map_err(|e| io_err(&path, e))?;
        Ok(self.manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_records_outputs_with_checksums() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("data.csv");
        std::fs::write(&file, "a,b\n1,2\n").unwrap();
        let mut mb = ManifestBuilder::new("run-otoc", Path::new("cfg.json"), dir.path());
        mb.set_config("abc123", 7);
        mb.finish_stage("simulate");
        mb.record_output(&file).unwrap();
        let manifest = mb.write().unwrap();
        assert_eq!(manifest.outputs.len(), 1);
        assert_eq!(manifest.outputs[0].path, "data.csv");
        assert_eq!(manifest.outputs[0].sha256.len(), 64);
        assert_eq!(manifest.status, "ok");
        let loaded: RunManifest = serde_json::from_str(
            &std::fs::read_to_string(dir.path().join("manifest.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(loaded, manifest);
    }

    #[test]
    fn identical_files_hash_identically() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.csv");
        let b = dir.path().join("b.csv");
        std::fs::write(&a, "same").unwrap();
        std::fs::write(&b, "same").unwrap();
        assert_eq!(sha256_hex_file(&a).unwrap(), sha256_hex_file(&b).unwrap());
    }
}
