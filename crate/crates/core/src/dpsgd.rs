//! DP-SGD baseline: per-example clipping and Gaussian noise on the
//! aggregated gradient.
//!
//! Noise has per-coordinate standard deviation `sigma * C / batch` on the
//! averaged gradient. No privacy accountant is kept; runs are described by
//! `sigma` alone.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::DatasetSplits;
use crate::nets::CganArch;
use crate::rng::RngState;
use crate::train::{train_cgan, TrainConfig, TrainOutcome};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApplyTo {
    Generator,
    Discriminator,
    #[default]
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpConfig {
    pub clip_norm: f64,
    pub sigma: f64,
    #[serde(default)]
    pub applies_to: ApplyTo,
}

impl DpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_norm > 0.0) || !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::Config(format!(
                "DP-SGD needs clip_norm > 0 and finite sigma >= 0, got C = {} and sigma = {}",
                self.clip_norm, self.sigma
            )));
        }
        Ok(())
    }
}

pub fn l2_norm(g: &[f64]) -> f64 {
    libm::sqrt(g.iter().map(|v| v * v).sum())
}

/// Scales every gradient by `min(1, C / ||g||)`.
pub fn clip_per_example(grads: Vec<Vec<f64>>, clip_norm: f64) -> Vec<Vec<f64>> {
    grads
        .into_iter()
        .map(|mut g| {
            let norm = l2_norm(&g);
            if norm > clip_norm {
                let scale = clip_norm / norm;
                g.iter_mut().for_each(|v| *v *= scale);
            }
            g
        })
        .collect()
}

pub(crate) fn mean(grads: &[Vec<f64>]) -> Vec<f64> {
    let Some(first) = grads.first() else { return Vec::new() };
    let mut acc = vec![0.0; first.len()];
    for g in grads {
        acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }
    let n = grads.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

/// Mean of the clipped gradients plus `N(0, (sigma * C / batch)^2)` per
/// coordinate. `sigma == 0` draws nothing.
pub fn noisy_aggregate(clipped: &[Vec<f64>], sigma: f64, clip_norm: f64, rng: &mut RngState) -> Result<Vec<f64>> {
    if clipped.is_empty() {
        return Err(Error::Invalid("noisy_aggregate needs at least one gradient".into()));
    }
    if let Some(g) = clipped.iter().find(|g| g.len() != clipped[0].len()) {
        return Err(Error::Shape(format!("gradients of length {} and {}", clipped[0].len(), g.len())));
    }
    let mut out = mean(clipped);
    if sigma > 0.0 {
        let std = sigma * clip_norm / clipped.len() as f64;
        out.iter_mut().for_each(|v| *v += rng.normal(0.0, std));
    }
    Ok(out)
}

/// Teacher training with clipped, noised gradient steps.
pub fn train_dpsgd(splits: &DatasetSplits, arch: &CganArch, cfg: &TrainConfig, dp: &DpConfig) -> Result<TrainOutcome> {
    train_cgan(&splits.train, arch, cfg, Some(dp))
}
