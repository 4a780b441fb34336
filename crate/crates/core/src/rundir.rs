//! Run directory layout and the hash manifest that guards it.
//!
//! ```text
//! <run>/manifest          JSON: config hash, seeds, timestamps, file hashes
//! <run>/config            canonical TOML of the run config
//! <run>/checkpoints/      step-NNNNNN.foldact-ckpt and .adam optimizer state
//! <run>/trajectories/     step-NNNNNN.jsonl rollout batches
//! <run>/metrics.csv       deterministic per-step metrics
//! <run>/timing.csv        wall-clock seconds per step
//! <run>/advantages.csv    per-entry returns, baselines and advantages
//! <run>/report/           tables written by the report generator
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_SCHEMA: &str = "foldact.manifest/1";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn unix_time() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

#[derive(Clone, Debug)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    /// Creates the directory skeleton.
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let d = Self::new(root);
        for sub in ["checkpoints", "trajectories", "report"] {
            fs::create_dir_all(d.root.join(sub))?;
        }
        Ok(d)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest")
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    pub fn timing(&self) -> PathBuf {
        self.root.join("timing.csv")
    }

    pub fn advantages(&self) -> PathBuf {
        self.root.join("advantages.csv")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }

    pub fn checkpoint(&self, step: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("step-{step:06}.{}", crate::policy::CHECKPOINT_EXTENSION))
    }

    pub fn optimizer_state(&self, step: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("step-{step:06}.adam"))
    }

    pub fn trajectories(&self, step: usize) -> PathBuf {
        self.root.join("trajectories").join(format!("step-{step:06}.jsonl"))
    }

    /// Steps with a complete checkpoint pair, ascending.
    pub fn checkpoint_steps(&self) -> Result<Vec<usize>> {
        let dir = self.root.join("checkpoints");
        let mut steps = Vec::new();
        if !dir.exists() {
            return Ok(steps);
        }
        for entry in fs::read_dir(&dir)? {
            let name = entry?.file_name().to_string_lossy().into_owned();
            let Some(rest) = name.strip_prefix("step-") else { continue };
            let Some(num) = rest.strip_suffix(&format!(".{}", crate::policy::CHECKPOINT_EXTENSION)) else { continue };
            if let Ok(s) = num.parse::<usize>() {
                if self.optimizer_state(s).exists() {
                    steps.push(s);
                }
            }
        }
        steps.sort_unstable();
        Ok(steps)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: String,
    pub config_hash: String,
    pub code_version: String,
    pub seed: u64,
    pub init_seed: u64,
    pub started_at: u64,
    pub finished_at: Option<u64>,
    /// Relative path to sha256 of every file in the run directory except the manifest.
    pub files: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(config_hash: String, seed: u64, init_seed: u64) -> Self {
        Self {
            schema: MANIFEST_SCHEMA.into(),
            config_hash,
            code_version: env!("CARGO_PKG_VERSION").into(),
            seed,
            init_seed,
            started_at: unix_time(),
            finished_at: None,
            files: BTreeMap::new(),
        }
    }

    /// Rehashes every file under the run directory.
    pub fn refresh(&mut self, dir: &RunDir) -> Result<()> {
        self.files.clear();
        for rel in list_files(dir.root())? {
            if rel == "manifest" {
                continue;
            }
            let bytes = fs::read(dir.root().join(&rel))?;
            self.files.insert(rel, sha256_hex(&bytes));
        }
        Ok(())
    }

    pub fn write(&self, dir: &RunDir) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        write_atomic(&dir.manifest(), text.as_bytes())
    }

    pub fn read(dir: &RunDir) -> Result<Self> {
        let path = dir.manifest();
        let text = fs::read_to_string(&path).map_err(|_| Error::MissingArtifacts(vec![path.display().to_string()]))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
        if m.schema != MANIFEST_SCHEMA {
            return Err(Error::format(path.display().to_string(), format!("unsupported schema {}", m.schema)));
        }
        Ok(m)
    }

    /// Checks that every recorded file exists with its recorded hash.
    pub fn verify(&self, dir: &RunDir) -> Result<()> {
        let mut missing = Vec::new();
        for (rel, hash) in &self.files {
            match fs::read(dir.root().join(rel)) {
                Err(_) => missing.push(rel.clone()),
                Ok(bytes) if sha256_hex(&bytes) != *hash => {
                    return Err(Error::format(rel.clone(), "content hash differs from the manifest"));
                }
                Ok(_) => {}
            }
        }
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::MissingArtifacts(missing))
        }
    }
}

/// Relative paths of all regular files below `root`, sorted, with `/` separators.
pub fn list_files(root: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d)? {
            let entry = entry?;
            let path = entry.path();
            if entry.file_type()?.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).expect("walk stays under root");
                out.push(rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/"));
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Writes through a temporary sibling and renames, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn verify_detects_single_byte_corruption() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = RunDir::create(tmp.path()).unwrap();
        fs::write(dir.metrics(), b"step,x\n0,1\n").unwrap();
        fs::write(dir.checkpoint(0), [1u8, 2, 3, 4]).unwrap();
        let mut m = Manifest::new("abc".into(), 1, 2);
        m.refresh(&dir).unwrap();
        m.write(&dir).unwrap();
        let m = Manifest::read(&dir).unwrap();
        m.verify(&dir).unwrap();
        assert_eq!(m.files.len(), 2);

        for (i, rel) in m.files.keys().enumerate() {
            let p = dir.root().join(rel);
            let orig = fs::read(&p).unwrap();
            for pos in 0..orig.len() {
                let mut b = orig.clone();
                b[pos] ^= 1 << (i % 8);
                fs::write(&p, &b).unwrap();
                assert!(m.verify(&dir).is_err(), "{rel} byte {pos}");
            }
            fs::write(&p, &orig).unwrap();
        }
        m.verify(&dir).unwrap();
        fs::remove_file(dir.metrics()).unwrap();
        assert!(matches!(m.verify(&dir), Err(Error::MissingArtifacts(v)) if v == vec!["metrics.csv".to_string()]));
    }

    #[test]
    fn checkpoint_steps_need_both_files() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = RunDir::create(tmp.path()).unwrap();
        for s in [0, 10, 20] {
            fs::write(dir.checkpoint(s), b"x").unwrap();
        }
        fs::write(dir.optimizer_state(0), b"x").unwrap();
        fs::write(dir.optimizer_state(20), b"x").unwrap();
        assert_eq!(dir.checkpoint_steps().unwrap(), vec![0, 20]);
    }
}
