//! Experiment configuration files.

use std::fmt;
use std::path::{Path, PathBuf};

use akd_core::distill::{DistillConfig, DistillMode};
use akd_core::dpsgd::DpConfig;
use akd_core::train::TrainConfig;
use akd_core::CganArch;
use serde::{Deserialize, Serialize};

use crate::error::{io, Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub arch: CganArch,
    pub teacher: TrainConfig,
    pub defense: Defense,
    #[serde(default = "default_n_seeds")]
    pub n_seeds: usize,
    #[serde(default)]
    pub metrics: MetricsConfig,
    #[serde(default)]
    pub attack: AttackConfig,
}

fn default_n_seeds() -> usize {
    5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic(SyntheticConfig),
    /// A folder written by [`crate::dataset::save_dataset`]; every seed
    /// reuses the same splits.
    Folder { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    #[serde(default = "default_n_train")]
    pub n_train: usize,
    #[serde(default = "default_n_proxy")]
    pub n_proxy: usize,
    #[serde(default = "default_n_test")]
    pub n_test: usize,
}

fn default_image_size() -> usize {
    32
}
fn default_n_train() -> usize {
    200
}
fn default_n_proxy() -> usize {
    50
}
fn default_n_test() -> usize {
    53
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            image_size: default_image_size(),
            n_train: default_n_train(),
            n_proxy: default_n_proxy(),
            n_test: default_n_test(),
        }
    }
}

/// Exactly one defense per experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Defense {
    None,
    Gauss { sigma: f64 },
    DpSgd(DpConfig),
    Dmp(DistillConfig),
    Akd(DistillConfig),
}

impl Defense {
    pub fn name(&self) -> &'static str {
        match self {
            Defense::None => "none",
            Defense::Gauss { .. } => "gauss",
            Defense::DpSgd(_) => "dp_sgd",
            Defense::Dmp(_) => "dmp",
            Defense::Akd(_) => "akd",
        }
    }

    /// The distillation settings with `mode` forced to match the variant.
    pub fn distill(&self) -> Option<DistillConfig> {
        match self {
            Defense::Dmp(c) => Some(DistillConfig { mode: DistillMode::Dmp, ..c.clone() }),
            Defense::Akd(c) => Some(DistillConfig { mode: DistillMode::Akd, ..c.clone() }),
            _ => None,
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Defense::None => Ok(()),
            Defense::Gauss { sigma } if *sigma >= 0.0 && sigma.is_finite() => Ok(()),
            Defense::Gauss { sigma } => Err(Error::Config(format!("gauss sigma must be finite and >= 0, got {sigma}"))),
            Defense::DpSgd(dp) => Ok(dp.validate()?),
            Defense::Dmp(c) | Defense::Akd(c) => {
                let expected = if matches!(self, Defense::Dmp(_)) { DistillMode::Dmp } else { DistillMode::Akd };
                if c.mode != expected {
                    return Err(Error::Config(format!(
                        "defense `{}` given distillation mode {:?}",
                        self.name(),
                        c.mode
                    )));
                }
                Ok(c.validate()?)
            }
        }
    }
}

impl fmt::Display for Defense {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Defense::Gauss { sigma } => write!(f, "gauss(sigma={sigma})"),
            Defense::DpSgd(dp) => write!(f, "dp_sgd(sigma={}, C={})", dp.sigma, dp.clip_norm),
            other => f.write_str(other.name()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    #[serde(default)]
    pub fx_seed: u64,
    #[serde(default = "default_fx_dim")]
    pub fx_dim: usize,
    #[serde(default = "default_n_bins")]
    pub n_bins: usize,
}

fn default_fx_dim() -> usize {
    64
}
fn default_n_bins() -> usize {
    20
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { fx_seed: 0, fx_dim: default_fx_dim(), n_bins: default_n_bins() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    /// Noise draws averaged per reconstruction-loss query.
    #[serde(default = "default_n_draws")]
    pub n_draws: usize,
}

fn default_n_draws() -> usize {
    1
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self { n_draws: default_n_draws() }
    }
}

impl ExperimentConfig {
    /// Parses and validates.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        match value.get("schema_version") {
            None => return Err(Error::Config("`schema_version` is required".into())),
            Some(v) if v.as_u64() != Some(SCHEMA_VERSION as u64) => {
                return Err(Error::Config(format!("unsupported schema_version {v}, expected {SCHEMA_VERSION}")))
            }
            _ => {}
        }
        let cfg: Self = serde_json::from_value(value)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).map_err(io(path))?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!("unsupported schema_version {}", self.schema_version)));
        }
        if self.n_seeds == 0 {
            return Err(Error::Config("n_seeds must be at least 1".into()));
        }
        self.arch.validate()?;
        self.teacher.validate()?;
        self.defense.validate()?;
        if let Some(student) = self.defense.distill().and_then(|d| d.student_arch) {
            student.validate()?;
            let (a, b) = (&student.generator, &self.arch.generator);
            if (a.image_size, a.in_channels, a.out_channels) != (b.image_size, b.in_channels, b.out_channels) {
                return Err(Error::Config("student_arch must share the teacher's image size and channels".into()));
            }
        }
        if let DatasetConfig::Synthetic(s) = &self.dataset {
            if s.image_size != self.arch.generator.image_size {
                return Err(Error::Config(format!(
                    "dataset image_size {} differs from arch image_size {}",
                    s.image_size, self.arch.generator.image_size
                )));
            }
            if s.n_test == 0 || s.n_train < s.n_test {
                return Err(Error::Config(format!(
                    "need 1 <= n_test <= n_train, got n_train {} and n_test {}",
                    s.n_train, s.n_test
                )));
            }
        }
        if self.metrics.fx_dim < 4 || self.metrics.n_bins < 2 || self.attack.n_draws == 0 {
            return Err(Error::Config("need fx_dim >= 4, n_bins >= 2 and n_draws >= 1".into()));
        }
        Ok(())
    }

    /// Seed of run `k`: the teacher seed offset by `k`.
    pub fn run_seed(&self, k: usize) -> u64 {
        self.teacher.seed.wrapping_add(k as u64)
    }
}
