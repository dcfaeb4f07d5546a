//! Run configuration: one versioned TOML document per run.

use anyhow::{bail, Context, Result};
use bpmm_core::changepoint::ChangePointOptions;
use bpmm_core::simgen::SimConfig;
use bpmm_core::HyperParams;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Idpac,
    Idpmac,
    Both,
    Baseline,
}

impl Method {
    /// Concrete estimators a method expands to.
    pub fn estimators(self) -> &'static [Estimator] {
        match self {
            Method::Idpac => &[Estimator::Idpac],
            Method::Idpmac => &[Estimator::Idpmac],
            Method::Both => &[Estimator::Idpac, Estimator::Idpmac],
            Method::Baseline => &[Estimator::Baseline],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Idpac,
    Idpmac,
    Baseline,
}

impl Estimator {
    pub fn name(self) -> &'static str {
        match self {
            Estimator::Idpac => "idpac",
            Estimator::Idpmac => "idpmac",
            Estimator::Baseline => "baseline",
        }
    }
}

/// External data instead of the simulated panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputConfig {
    /// Binary panel tensor or CSV manifest.
    pub data: PathBuf,
    pub covariates: PathBuf,
    #[serde(default = "yes")]
    pub demean: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrewhitenOptions {
    pub enabled: bool,
    pub max_ar_order: usize,
}

impl Default for PrewhitenOptions {
    fn default() -> Self {
        Self {
            enabled: false,
            max_ar_order: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SubgroupOptions {
    /// Fixed number of subgroups; elbow selection when absent.
    pub k: Option<usize>,
    /// Largest K tried by the elbow; defaults to the number of components.
    pub max_k: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineOptions {
    /// Odd window length in scans.
    pub window: usize,
}

impl Default for BaselineOptions {
    fn default() -> Self {
        Self { window: 31 }
    }
}

/// Settings of the `reproduce-tables` protocol. Estimation settings come
/// from the run's `hyper`, `changepoint` and `baseline` sections; subgroups
/// default to `K = H`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    /// Replicate seeds; each replaces the seed of `sim`.
    pub seeds: Vec<u64>,
    /// Simulation design shared by all replicates.
    pub sim: SimConfig,
    pub run_idpmac: bool,
    /// Extra spurious covariates for the robustness comparison; 0 skips it.
    pub spurious: usize,
    pub naive: bool,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            seeds: vec![1, 2, 3, 4, 5],
            sim: SimConfig::scaled(1),
            run_idpmac: true,
            spurious: 4,
            naive: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub method: Method,
    /// Worker threads; 0 uses every core. Results do not depend on it.
    #[serde(default)]
    pub threads: usize,
    #[serde(default)]
    pub input: Option<InputConfig>,
    #[serde(default)]
    pub prewhiten: PrewhitenOptions,
    #[serde(default)]
    pub hyper: HyperParams,
    /// The simulation seed is always the run seed.
    #[serde(default)]
    pub sim: SimConfig,
    #[serde(default)]
    pub changepoint: ChangePointOptions,
    #[serde(default)]
    pub subgroup: SubgroupOptions,
    #[serde(default)]
    pub baseline: BaselineOptions,
    #[serde(default)]
    pub protocol: ProtocolConfig,
}

fn default_output() -> PathBuf {
    PathBuf::from("bpmm-out")
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            output_dir: default_output(),
            method: Method::default(),
            threads: 0,
            input: None,
            prewhiten: PrewhitenOptions::default(),
            hyper: HyperParams::default(),
            sim: SimConfig {
                seed: 0,
                ..SimConfig::default()
            },
            changepoint: ChangePointOptions::default(),
            subgroup: SubgroupOptions::default(),
            baseline: BaselineOptions::default(),
            protocol: ProtocolConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).context("config does not match the schema")?;
        cfg.sim.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    /// Checks every section before any computation starts.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            bail!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            );
        }
        self.hyper.validate()?;
        if self.input.is_none() {
            self.sim.validate()?;
        }
        let w = self.baseline.window;
        if w < 3 || w % 2 == 0 {
            bail!("baseline.window must be odd and at least 3, got {w}");
        }
        let cp = &self.changepoint;
        if cp.grid_multipliers.is_empty()
            || cp.grid_multipliers[0] <= 0.0
            || cp.grid_multipliers.windows(2).any(|p| p[1] <= p[0])
        {
            bail!("changepoint.grid_multipliers must be positive and strictly increasing");
        }
        if !(cp.freq_threshold > 0.0 && cp.freq_threshold <= 1.0) {
            bail!("changepoint.freq_threshold must lie in (0, 1]");
        }
        if self.subgroup.k == Some(0) || self.subgroup.max_k == Some(0) {
            bail!("subgroup counts must be positive");
        }
        if self.protocol.seeds.is_empty() {
            bail!("protocol.seeds is empty");
        }
        self.protocol.sim.validate().context("in [protocol.sim]")?;
        Ok(())
    }

    /// SHA-256 over the canonical JSON of every setting that can change a
    /// result (output location and thread count excluded).
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        c.threads = 0;
        let json = serde_json::to_vec(&c).expect("config serialises");
        let digest = Sha256::digest(&json);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_document() {
        let c = RunConfig::from_toml("schema_version = 1\nseed = 7\n").unwrap();
        assert_eq!(c.sim.seed, 7);
        assert_eq!(c.method, Method::Idpac);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml("schema_version = 1\nbogus = 2\n").is_err());
        assert!(RunConfig::from_toml("schema_version = 1\n[hyper]\nn_component = 2\n").is_err());
    }

    #[test]
    fn round_trip_and_hash() {
        let c = RunConfig::default();
        let back = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        let mut d = c.clone();
        d.output_dir = "elsewhere".into();
        d.threads = 3;
        assert_eq!(c.hash(), d.hash());
        d.seed = 1;
        assert_ne!(c.hash(), d.hash());
    }
}
