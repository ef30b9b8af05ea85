//! Regular conditional-GAN training of the (private) teacher generator.
//!
//! Each batch runs one discriminator update followed by one generator update.
//! The discriminator minimizes `-[ln D(y,x) + ln(1 - D(G(z,x),x))]`; the
//! generator minimizes the non-saturating `-ln D(G(z,x),x)` plus
//! `lambda * mean|G(z,x) - y|`.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{DatasetSplits, PairedSample};
use crate::dpsgd::{self, ApplyTo, DpConfig};
use crate::nets::{init_discriminator, init_generator, CganArch, DiscriminatorModel, GeneratorModel};
use crate::optim::{Adam, AdamConfig};
use crate::rng::RngState;
use crate::tensor::ImageTensor;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_lambda")]
    pub lambda_l1: f64,
    pub seed: u64,
}

fn default_batch_size() -> usize {
    1
}

pub(crate) fn default_lr() -> f64 {
    2e-4
}

pub(crate) fn default_lambda() -> f64 {
    100.0
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 1,
            lr: default_lr(),
            lambda_l1: default_lambda(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lambda_l1 >= 0.0) || !(self.lr > 0.0) {
            return Err(Error::Config(format!(
                "need lambda_l1 >= 0 and lr > 0, got {} and {}",
                self.lambda_l1, self.lr
            )));
        }
        Ok(())
    }

    pub(crate) fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, ..AdamConfig::default() }
    }
}

/// Which form of the adversarial generator term to minimize.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorObjective {
    /// `-ln D(G(z,x),x)`.
    #[default]
    NonSaturating,
    /// `+ln D(G(z,x),x)`, the sign the distillation objective is usually
    /// printed with. Kept for ablations.
    AsPrinted,
}

/// `-[ln D(real, x) + ln(1 - D(fake, x))]` on the tape.
pub fn discriminator_objective(
    tape: &mut Tape,
    d: &DiscriminatorModel,
    d_vars: &[Var],
    real: Var,
    fake: Var,
    cond: Var,
) -> Result<Var> {
    let p_real = d.forward_on(tape, d_vars, real, cond)?;
    let p_fake = d.forward_on(tape, d_vars, fake, cond)?;
    let log_real = tape.ln(p_real);
    let one_minus = tape.affine(p_fake, -1.0, 1.0);
    let log_fake = tape.ln(one_minus);
    let total = tape.add(log_real, log_fake)?;
    Ok(tape.affine(total, -1.0, 0.0))
}

/// Adversarial generator term plus `lambda * mean|fake - target|`.
#[allow(clippy::too_many_arguments)]
pub fn generator_objective(
    tape: &mut Tape,
    d: &DiscriminatorModel,
    d_vars: &[Var],
    fake: Var,
    target: Var,
    cond: Var,
    lambda: f64,
    form: GeneratorObjective,
) -> Result<Var> {
    let p_fake = d.forward_on(tape, d_vars, fake, cond)?;
    let log_p = tape.ln(p_fake);
    let log_p = tape.sum(log_p);
    let adv = match form {
        GeneratorObjective::NonSaturating => tape.affine(log_p, -1.0, 0.0),
        GeneratorObjective::AsPrinted => log_p,
    };
    let l1 = tape.mean_abs_diff(fake, target)?;
    let l1 = tape.affine(l1, lambda, 0.0);
    tape.add(adv, l1)
}

/// Discriminator loss for one labeled sample and one noise draw.
pub fn d_loss(
    d: &DiscriminatorModel,
    g: &GeneratorModel,
    x: &ImageTensor,
    y: &ImageTensor,
    noise: &mut RngState,
) -> Result<f64> {
    let mut tape = Tape::new();
    let gv = g.params.bind(&mut tape, false)?;
    let dv = d.params.bind(&mut tape, false)?;
    let xv = tape.image(x);
    let yv = tape.image(y);
    let fake = g.forward_on(&mut tape, &gv, xv, noise)?;
    let loss = discriminator_objective(&mut tape, d, &dv, yv, fake, xv)?;
    finite(tape.scalar(loss), "d_loss")
}

/// Generator loss for one labeled sample and one noise draw.
pub fn g_loss(
    d: &DiscriminatorModel,
    g: &GeneratorModel,
    x: &ImageTensor,
    y: &ImageTensor,
    lambda: f64,
    noise: &mut RngState,
) -> Result<f64> {
    let mut tape = Tape::new();
    let gv = g.params.bind(&mut tape, false)?;
    let dv = d.params.bind(&mut tape, false)?;
    let xv = tape.image(x);
    let yv = tape.image(y);
    let fake = g.forward_on(&mut tape, &gv, xv, noise)?;
    let loss = generator_objective(&mut tape, d, &dv, fake, yv, xv, lambda, GeneratorObjective::NonSaturating)?;
    finite(tape.scalar(loss), "g_loss")
}

pub(crate) fn mean_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| libm::fabs(p - q)).sum::<f64>() / a.len() as f64
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NumericFailure { layer: what.into() })
    }
}

/// Mean losses of one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub d_loss: f64,
    pub g_loss: f64,
    /// Mean `|G(z,x) - target|` over the epoch's training forwards.
    pub l1: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub generator: GeneratorModel,
    pub log: Vec<EpochStats>,
}

/// Combines per-example gradients: a plain mean, or DP-SGD clipping and
/// noising when `dp` is set.
pub(crate) fn combine(grads: Vec<Vec<f64>>, dp: Option<(&DpConfig, &mut RngState)>) -> Result<Vec<f64>> {
    match dp {
        None => Ok(dpsgd::mean(&grads)),
        Some((cfg, rng)) => {
            let clipped = dpsgd::clip_per_example(grads, cfg.clip_norm);
            dpsgd::noisy_aggregate(&clipped, cfg.sigma, cfg.clip_norm, rng)
        }
    }
}

struct Forward {
    tape: Tape,
    g_vars: Vec<Var>,
    x: Var,
    y: Var,
    fake: Var,
    shape: Vec<usize>,
}

fn diverged(epoch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NumericFailure { .. } => Error::Diverged { epoch },
        other => other,
    }
}

pub(crate) fn train_cgan(
    train: &[PairedSample],
    arch: &CganArch,
    cfg: &TrainConfig,
    dp: Option<&DpConfig>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    arch.validate()?;
    if let Some(dp) = dp {
        dp.validate()?;
    }
    if train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let targets = train.iter().map(|s| s.labeled_y()).collect::<Result<Vec<_>>>()?;
    let mut g = init_generator(&arch.generator, cfg.seed)?;
    let mut d = init_discriminator(&arch.discriminator, cfg.seed)?;
    let mut opt_g = Adam::new(cfg.adam(), g.num_params());
    let mut opt_d = Adam::new(cfg.adam(), d.params.num_params());
    let root = RngState::new(cfg.seed);
    let mut order_rng = root.split(1);
    let mut noise = root.split(2);
    let mut dp_rng = root.split(3);
    let dp_d = dp.filter(|c| matches!(c.applies_to, ApplyTo::Discriminator | ApplyTo::Both));
    let dp_g = dp.filter(|c| matches!(c.applies_to, ApplyTo::Generator | ApplyTo::Both));

    let mut log = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        order_rng.shuffle(&mut order);
        let (mut sum_d, mut sum_g, mut sum_l1) = (0.0, 0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let mut fwd = Vec::with_capacity(batch.len());
            for &i in batch {
                let mut tape = Tape::new();
                let g_vars = g.params.bind(&mut tape, true)?;
                let x = tape.image(train[i].x());
                let y = tape.image(targets[i]);
                let fake = g.forward_on(&mut tape, &g_vars, x, &mut noise).map_err(diverged(epoch))?;
                let shape = tape.shape(fake).to_vec();
                fwd.push(Forward { tape, g_vars, x, y, fake, shape });
            }

            let mut d_grads = Vec::with_capacity(batch.len());
            for f in &fwd {
                let mut tape = Tape::new();
                let d_vars = d.params.bind(&mut tape, true)?;
                let real = tape.constant(&f.shape, f.tape.value(f.y).to_vec())?;
                let fake = tape.constant(&f.shape, f.tape.value(f.fake).to_vec())?;
                let cond = tape.constant(&f.shape, f.tape.value(f.x).to_vec())?;
                let loss = discriminator_objective(&mut tape, &d, &d_vars, real, fake, cond)
                    .map_err(diverged(epoch))?;
                sum_d += tape.scalar(loss);
                tape.backward(loss)?;
                d_grads.push(d.params.collect_grads(&tape, &d_vars));
            }
            let gd = combine(d_grads, dp_d.map(|c| (c, &mut dp_rng)))?;
            opt_d.step(&mut d.params, &gd)?;

            let mut g_grads = Vec::with_capacity(batch.len());
            for mut f in fwd {
                let d_vars = d.params.bind(&mut f.tape, false)?;
                let loss = generator_objective(
                    &mut f.tape,
                    &d,
                    &d_vars,
                    f.fake,
                    f.y,
                    f.x,
                    cfg.lambda_l1,
                    GeneratorObjective::NonSaturating,
                )
                .map_err(diverged(epoch))?;
                sum_g += f.tape.scalar(loss);
                sum_l1 += mean_abs(f.tape.value(f.fake), f.tape.value(f.y));
                f.tape.backward(loss)?;
                g_grads.push(g.params.collect_grads(&f.tape, &f.g_vars));
            }
            let gg = combine(g_grads, dp_g.map(|c| (c, &mut dp_rng)))?;
            opt_g.step(&mut g.params, &gg)?;
        }
        let n = train.len() as f64;
        let stats = EpochStats {
            epoch,
            d_loss: sum_d / n,
            g_loss: sum_g / n,
            l1: sum_l1 / n,
        };
        if !(stats.d_loss.is_finite() && stats.g_loss.is_finite()) || !g.params.all_finite() {
            return Err(Error::Diverged { epoch });
        }
        log.push(stats);
    }
    Ok(TrainOutcome { generator: g, log })
}

/// Trains a teacher on the training split with no defense.
pub fn train_regular(splits: &DatasetSplits, arch: &CganArch, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_cgan(&splits.train, arch, cfg, None)
}
