//! Stage manifest: fingerprints and artifact hashes.
//!
//! A stage reruns only when its fingerprint (config slice + upstream
//! artifact hashes) changes, an output is missing or altered, or
//! `--force` is given.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    hex(&h.finalize())
}

fn hex(digest: &[u8]) -> String {
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn hash_file(path: &Path) -> anyhow::Result<String> {
    let bytes = std::fs::read(path)
        .with_context(|| format!("cannot read artifact {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct StageRecord {
    pub fingerprint: String,
    /// Artifact path (relative to the work dir) -> sha256.
    pub outputs: BTreeMap<String, String>,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub stages: BTreeMap<String, StageRecord>,
}

impl Manifest {
    pub fn path(work_dir: &Path) -> PathBuf {
        work_dir.join("manifest.json")
    }

    pub fn load(work_dir: &Path) -> anyhow::Result<Self> {
        let path = Self::path(work_dir);
        if !path.exists() {
            return Ok(Self::default());
        }
        let text = std::fs::read_to_string(&path)
            .with_context(|| format!("cannot read {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("corrupt manifest {}", path.display()))
    }

    pub fn save(&self, work_dir: &Path) -> anyhow::Result<()> {
        std::fs::create_dir_all(work_dir)?;
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(Self::path(work_dir), text)?;
        Ok(())
    }

    /// Hashes of a finished stage's outputs, used as downstream inputs.
    pub fn stage_outputs(&self, stage: &str) -> Option<&BTreeMap<String, String>> {
        self.stages.get(stage).map(|r| &r.outputs)
    }

    /// Whether `stage` can be skipped: fingerprint matches and every
    /// recorded output still exists with the same hash.
    pub fn is_fresh(&self, work_dir: &Path, stage: &str, fingerprint: &str) -> bool {
        match self.stages.get(stage) {
            Some(record) if record.fingerprint == fingerprint => {
                record.outputs.iter().all(|(rel, expect)| {
                    let path = work_dir.join(rel);
                    path.exists() && hash_file(&path).map(|h| &h == expect).unwrap_or(false)
                })
            }
            _ => false,
        }
    }

    pub fn record(
        &mut self,
        stage: &str,
        fingerprint: String,
        work_dir: &Path,
        output_paths: &[PathBuf],
        wall_secs: f64,
    ) -> anyhow::Result<()> {
        let mut outputs = BTreeMap::new();
        for p in output_paths {
            let rel = p
                .strip_prefix(work_dir)
                .unwrap_or(p)
                .to_string_lossy()
                .to_string();
            outputs.insert(rel, hash_file(p)?);
        }
        self.stages
            .insert(stage.to_string(), StageRecord { fingerprint, outputs, wall_secs });
        Ok(())
    }
}

/// Fingerprint of a stage: its config slice plus upstream output hashes.
pub fn fingerprint(config_slice: &str, upstream: &[&BTreeMap<String, String>]) -> String {
    let mut h = Sha256::new();
    h.update(config_slice.as_bytes());
    for outputs in upstream {
        for (path, hash) in *outputs {
            h.update(path.as_bytes());
            h.update(hash.as_bytes());
        }
    }
    hex(&h.finalize())
}
