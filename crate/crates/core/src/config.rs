//! Experiment configuration read from TOML. Unknown keys are rejected and
//! every field is validated before any computation starts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::{BaseTrainConfig, ConstrainedTrainConfig};
use crate::solver::{SolverConfig, SolverMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_samples: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { n_samples: 2000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeedConfig {
    /// Seeds the base dataset, initialization and shuffling.
    pub base: u64,
    /// One constrained run per entry.
    pub runs: Vec<u64>,
}

impl Default for SeedConfig {
    fn default() -> Self {
        Self {
            base: 0,
            runs: (1..=10).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathConfig {
    pub out_dir: PathBuf,
    /// Dataset CSV for base training; generated from the seed when unset.
    pub dataset: Option<PathBuf>,
    /// Base network checkpoint; defaults to the one `train-base` writes.
    pub base_checkpoint: Option<PathBuf>,
    /// Constraint matrix CSV; defaults to the one `train-base` writes.
    pub constraints: Option<PathBuf>,
}

impl Default for PathConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("out"),
            dataset: None,
            base_checkpoint: None,
            constraints: None,
        }
    }
}

impl PathConfig {
    pub fn base_checkpoint(&self) -> PathBuf {
        self.base_checkpoint
            .clone()
            .unwrap_or_else(|| self.out_dir.join(crate::io::BASE_CHECKPOINT))
    }

    pub fn constraints(&self) -> PathBuf {
        self.constraints
            .clone()
            .unwrap_or_else(|| self.out_dir.join(crate::io::CONSTRAINTS_CSV))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    /// Multiplies every tolerance of the invariant suite.
    pub tolerance_scale: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self { tolerance_scale: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub base: BaseTrainConfig,
    pub constrained: ConstrainedTrainConfig,
    pub solver: SolverConfig,
    pub seeds: SeedConfig,
    pub paths: PathConfig,
    pub verify: VerifyConfig,
}

/// Command-line overrides applied on top of a file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub runs: Option<usize>,
    pub out_dir: Option<PathBuf>,
    pub solver_mode: Option<SolverMode>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads and validates a config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg = Self::from_toml_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// `--seed` sets the base seed and the first run seed; `--runs` keeps
    /// the first run seed and makes the run seeds consecutive.
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.seeds.base = seed;
            let n = self.seeds.runs.len().max(1);
            self.seeds.runs = (seed..).take(n).collect();
        }
        if let Some(n) = o.runs {
            let first = self.seeds.runs.first().copied().unwrap_or(self.seeds.base);
            self.seeds.runs = (first..).take(n).collect();
        }
        if let Some(dir) = &o.out_dir {
            self.paths.out_dir = dir.clone();
        }
        if let Some(mode) = o.solver_mode {
            self.solver.mode = mode;
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.n_samples == 0 {
            return Err(Error::Config("data.n_samples must be positive".into()));
        }
        self.base.validate()?;
        self.constrained.validate()?;
        self.solver.validate()?;
        if self.seeds.runs.is_empty() {
            return Err(Error::Config("seeds.runs must not be empty".into()));
        }
        let mut sorted = self.seeds.runs.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.runs.len() {
            return Err(Error::Config("seeds.runs contains duplicates".into()));
        }
        let scale = self.verify.tolerance_scale;
        if !(scale.is_finite() && scale >= 0.0) {
            return Err(Error::Config("verify.tolerance_scale must be finite and non-negative".into()));
        }
        if let Some(p) = &self.paths.dataset {
            require_file(p, "paths.dataset")?;
        }
        Ok(())
    }
}

/// Fails with a configuration error when an input file is missing.
pub fn require_file(path: &Path, key: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("{key}: no such file {}", path.display())))
    }
}
