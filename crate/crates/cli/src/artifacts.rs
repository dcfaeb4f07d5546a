//! On-disk artifacts. Every stage directory holds a `manifest.json` carrying
//! the run's config hash and seed; the manifest is written last, so its
//! presence marks a finished stage.

use anyhow::{bail, Context, Result};
use bpmm_core::io::{read_tensor, write_tensor};
use ndarray::{ArrayD, Dimension};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Complete,
    /// Artifacts written, but an estimator hit its iteration limit.
    NotConverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
    pub status: StageStatus,
    pub files: Vec<String>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Option<Manifest>> {
        let path = dir.join(MANIFEST);
        if !path.exists() {
            return Ok(None);
        }
        read_json(&path).map(Some)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(MANIFEST), self)
    }
}

/// Stage locations under the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    pub fn sim(&self) -> PathBuf {
        self.root.join("sim")
    }

    pub fn fit(&self, name: &str) -> PathBuf {
        self.root.join("fit").join(name)
    }

    pub fn post(&self, name: &str) -> PathBuf {
        self.root.join("post").join(name)
    }

    pub fn eval(&self, name: &str) -> PathBuf {
        self.root.join("eval").join(name)
    }

    pub fn tables(&self) -> PathBuf {
        self.root.join("tables")
    }
}

/// Reads a stage manifest and insists that it belongs to the given run.
pub fn require_stage(dir: &Path, hash: &str, force: bool) -> Result<Manifest> {
    let Some(m) = Manifest::read(dir)? else {
        bail!("missing input stage {} (run the earlier command first)", dir.display());
    };
    if m.config_hash != hash {
        if force {
            log::warn!("{}: config hash {} differs from this run; continuing (--force)", dir.display(), m.config_hash);
        } else {
            bail!(
                "{} was produced by config {} but this run is {}; rerun it or pass --force",
                dir.display(),
                m.config_hash,
                hash
            );
        }
    }
    Ok(m)
}

/// Whether a stage finished under the same config and can be skipped.
pub fn already_done(dir: &Path, hash: &str) -> Result<bool> {
    Ok(Manifest::read(dir)?.is_some_and(|m| m.config_hash == hash))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn save_tensor<D: Dimension>(path: &Path, a: &ndarray::Array<f64, D>) -> Result<()> {
    write_tensor(path, &a.clone().into_dyn()).with_context(|| format!("writing {}", path.display()))
}

pub fn load_tensor(path: &Path) -> Result<ArrayD<f64>> {
    read_tensor(path).with_context(|| format!("reading {}", path.display()))
}
