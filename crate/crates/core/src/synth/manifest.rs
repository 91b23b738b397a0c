//! Run manifests: what each pipeline stage read and wrote, with SHA-256
//! digests, and how long it took.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    /// Relative to the run directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub seed: u64,
    pub threads: usize,
    pub config: serde_json::Value,
    pub stages: Vec<StageRecord>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

/// Collects stage records for files under one run directory.
pub struct ManifestWriter {
    root: PathBuf,
    manifest: RunManifest,
}

impl ManifestWriter {
    pub fn new(root: &Path, seed: u64, threads: usize, config: serde_json::Value) -> Self {
        Self {
            root: root.to_path_buf(),
            manifest: RunManifest {
                seed,
                threads,
                config,
                stages: Vec::new(),
            },
        }
    }

    fn digest(&self, rel: &str) -> Result<FileDigest> {
        Ok(FileDigest {
            path: rel.to_string(),
            sha256: sha256_file(&self.root.join(rel))?,
        })
    }

    /// Runs `f`, which returns the relative paths it wrote, and records the
    /// stage.
    pub fn stage<F>(&mut self, name: &str, inputs: &[String], f: F) -> Result<()>
    where
        F: FnOnce() -> Result<Vec<String>>,
    {
        let inputs = inputs.iter().map(|p| self.digest(p)).collect::<Result<Vec<_>>>()?;
        let start = Instant::now();
        let outputs = f()?;
        let seconds = start.elapsed().as_secs_f64();
        let outputs = outputs.iter().map(|p| self.digest(p)).collect::<Result<Vec<_>>>()?;
        self.manifest.stages.push(StageRecord {
            name: name.to_string(),
            inputs,
            outputs,
            seconds,
        });
        Ok(())
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn finish(self, file: &str) -> Result<RunManifest> {
        std::fs::write(
            self.root.join(file),
            serde_json::to_string_pretty(&self.manifest)? + "\n",
        )?;
        Ok(self.manifest)
    }
}

pub fn load_manifest(path: &Path) -> Result<RunManifest> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

/// Re-hashes every recorded output under `root`.
pub fn verify_manifest(m: &RunManifest, root: &Path) -> Result<()> {
    for st in &m.stages {
        for d in st.inputs.iter().chain(&st.outputs) {
            let got = sha256_file(&root.join(&d.path))?;
            if got != d.sha256 {
                return Err(Error::Format(format!("digest mismatch for {} (stage {})", d.path, st.name)));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub name: String,
    pub seconds: f64,
    pub share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub stages: Vec<StageTiming>,
    pub total_seconds: f64,
}

pub fn profile_pipeline(m: &RunManifest) -> TimingReport {
    let total: f64 = m.stages.iter().map(|s| s.seconds).sum();
    TimingReport {
        stages: m
            .stages
            .iter()
            .map(|s| StageTiming {
                name: s.name.clone(),
                seconds: s.seconds,
                share: if total > 0.0 { s.seconds / total } else { 0.0 },
            })
            .collect(),
        total_seconds: total,
    }
}

/// The manifest as JSON with every `seconds` field removed, for comparing
/// runs.
pub fn without_timings(m: &RunManifest) -> serde_json::Value {
    let mut v = serde_json::to_value(m).expect("manifest serializes");
    if let Some(stages) = v.get_mut("stages").and_then(|s| s.as_array_mut()) {
        for s in stages {
            if let Some(o) = s.as_object_mut() {
                o.remove("seconds");
            }
        }
    }
    v
}
