//! Adversarial knowledge distillation (AKD) and the L1-only DMP variant.
//!
//! The teacher is a black box reachable only through [`Translator`]. A
//! student generator and a fresh discriminator `D_s` are trained on the
//! unlabeled proxy split: `D_s` learns to tell teacher outputs from student
//! outputs, and the student learns to fool it while staying close to the
//! teacher in L1. Teacher and student see the same dropout draw `z` in each
//! step.

use alloc::format;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::PairedSample;
use crate::nets::{init_discriminator, init_generator, CganArch, DiscriminatorModel, GeneratorModel, Translator};
use crate::optim::Adam;
use crate::rng::RngState;
use crate::tensor::ImageTensor;
use crate::train::{
    default_lambda, default_lr, discriminator_objective, generator_objective, mean_abs, GeneratorObjective,
    TrainConfig,
};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillMode {
    #[default]
    Akd,
    Dmp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    #[serde(default)]
    pub mode: DistillMode,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub objective: GeneratorObjective,
    /// Defaults to the teacher's architecture.
    #[serde(default)]
    pub student_arch: Option<CganArch>,
}

fn default_epochs() -> usize {
    200
}

fn default_batch_size() -> usize {
    1
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            mode: DistillMode::Akd,
            epochs: default_epochs(),
            lambda: default_lambda(),
            lr: default_lr(),
            batch_size: default_batch_size(),
            seed: 0,
            objective: GeneratorObjective::NonSaturating,
            student_arch: None,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        // Same numeric rules as teacher training.
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            lambda_l1: self.lambda,
            seed: self.seed,
        }
        .validate()
    }
}

/// Counts queries made to a wrapped teacher.
pub struct AuditedTeacher<T> {
    inner: T,
    queries: AtomicUsize,
}

impl<T: Translator> AuditedTeacher<T> {
    pub fn new(inner: T) -> Self {
        Self { inner, queries: AtomicUsize::new(0) }
    }

    pub fn queries(&self) -> usize {
        self.queries.load(Ordering::Relaxed)
    }

    pub fn into_inner(self) -> T {
        self.inner
    }
}

impl<T: Translator> Translator for AuditedTeacher<T> {
    fn translate(&self, x: &ImageTensor, noise: &mut RngState) -> Result<ImageTensor> {
        self.queries.fetch_add(1, Ordering::Relaxed);
        self.inner.translate(x, noise)
    }
}

/// `-[ln D_s(G_t(z,x),x) + ln(1 - D_s(G_s(z,x),x))]` with one shared `z`.
///
/// `noise` ends where the student's draw ended.
pub fn student_d_loss(
    d_s: &DiscriminatorModel,
    g_s: &GeneratorModel,
    g_t: &dyn Translator,
    x: &ImageTensor,
    noise: &mut RngState,
) -> Result<f64> {
    let teacher_out = g_t.translate(x, &mut noise.clone())?;
    let mut tape = Tape::new();
    let gv = g_s.params.bind(&mut tape, false)?;
    let dv = d_s.params.bind(&mut tape, false)?;
    let xv = tape.image(x);
    let tv = tape.image(&teacher_out);
    let fake = g_s.forward_on(&mut tape, &gv, xv, noise)?;
    let loss = discriminator_objective(&mut tape, d_s, &dv, tv, fake, xv)?;
    finite(tape.scalar(loss), "student_d_loss")
}

/// `-ln D_s(G_s(z,x),x) + lambda * mean|G_s(z,x) - G_t(z,x)|` with one
/// shared `z`.
pub fn student_g_loss(
    d_s: &DiscriminatorModel,
    g_s: &GeneratorModel,
    g_t: &dyn Translator,
    x: &ImageTensor,
    lambda: f64,
    noise: &mut RngState,
) -> Result<f64> {
    let teacher_out = g_t.translate(x, &mut noise.clone())?;
    let mut tape = Tape::new();
    let gv = g_s.params.bind(&mut tape, false)?;
    let dv = d_s.params.bind(&mut tape, false)?;
    let xv = tape.image(x);
    let tv = tape.image(&teacher_out);
    let fake = g_s.forward_on(&mut tape, &gv, xv, noise)?;
    let loss = generator_objective(&mut tape, d_s, &dv, fake, tv, xv, lambda, GeneratorObjective::NonSaturating)?;
    finite(tape.scalar(loss), "student_g_loss")
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NumericFailure { layer: what.into() })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillEpoch {
    pub epoch: usize,
    /// `None` in DMP mode, which has no discriminator.
    pub ds_loss: Option<f64>,
    pub gs_loss: f64,
    pub imitation_l1: f64,
}

#[derive(Clone, Debug)]
pub struct DistillOutcome {
    pub student: GeneratorModel,
    pub log: Vec<DistillEpoch>,
    pub teacher_queries: usize,
}

struct StudentForward {
    tape: Tape,
    g_vars: Vec<crate::autodiff::Var>,
    x: crate::autodiff::Var,
    t: crate::autodiff::Var,
    fake: crate::autodiff::Var,
    shape: Vec<usize>,
}

fn diverged(epoch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NumericFailure { .. } => Error::Diverged { epoch },
        other => other,
    }
}

fn distill(teacher: &dyn Translator, proxy: &[PairedSample], arch: &CganArch, cfg: &DistillConfig) -> Result<DistillOutcome> {
    cfg.validate()?;
    arch.validate()?;
    if proxy.is_empty() {
        return Err(Error::Config("proxy split is empty".into()));
    }
    if let Some(s) = proxy.iter().find(|s| s.is_labeled()) {
        return Err(Error::Invalid(format!(
            "proxy sample `{}` carries a ground truth; distillation takes unlabeled inputs only",
            s.id()
        )));
    }
    let teacher = AuditedTeacher::new(teacher);
    let adam = crate::optim::AdamConfig { lr: cfg.lr, ..Default::default() };
    let mut g = init_generator(&arch.generator, cfg.seed)?;
    let mut opt_g = Adam::new(adam, g.num_params());
    let mut d = match cfg.mode {
        DistillMode::Akd => Some(init_discriminator(&arch.discriminator, cfg.seed)?),
        DistillMode::Dmp => None,
    };
    let mut opt_d = d.as_ref().map(|d| Adam::new(adam, d.params.num_params()));
    let root = RngState::new(cfg.seed);
    let mut order_rng = root.split(1);
    let mut noise = root.split(2);

    let mut log = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..proxy.len()).collect();
    for epoch in 0..cfg.epochs {
        order_rng.shuffle(&mut order);
        let (mut sum_d, mut sum_g, mut sum_l1) = (0.0, 0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let mut fwd = Vec::with_capacity(batch.len());
            for &i in batch {
                let x_img = proxy[i].x();
                let teacher_out = teacher.translate(x_img, &mut noise.clone()).map_err(diverged(epoch))?;
                let mut tape = Tape::new();
                let g_vars = g.params.bind(&mut tape, true)?;
                let x = tape.image(x_img);
                let t = tape.image(&teacher_out);
                let fake = g.forward_on(&mut tape, &g_vars, x, &mut noise).map_err(diverged(epoch))?;
                let shape = tape.shape(fake).to_vec();
                fwd.push(StudentForward { tape, g_vars, x, t, fake, shape });
            }

            if let (Some(d), Some(opt_d)) = (d.as_mut(), opt_d.as_mut()) {
                let mut d_grads = Vec::with_capacity(batch.len());
                for f in &fwd {
                    let mut tape = Tape::new();
                    let d_vars = d.params.bind(&mut tape, true)?;
                    let real = tape.constant(&f.shape, f.tape.value(f.t).to_vec())?;
                    let fake = tape.constant(&f.shape, f.tape.value(f.fake).to_vec())?;
                    let cond = tape.constant(&f.shape, f.tape.value(f.x).to_vec())?;
                    let loss = discriminator_objective(&mut tape, d, &d_vars, real, fake, cond).map_err(diverged(epoch))?;
                    sum_d += tape.scalar(loss);
                    tape.backward(loss)?;
                    d_grads.push(d.params.collect_grads(&tape, &d_vars));
                }
                opt_d.step(&mut d.params, &crate::dpsgd::mean(&d_grads))?;
            }

            let mut g_grads = Vec::with_capacity(batch.len());
            for mut f in fwd {
                let loss = match d.as_ref() {
                    Some(d) => {
                        let d_vars = d.params.bind(&mut f.tape, false)?;
                        generator_objective(&mut f.tape, d, &d_vars, f.fake, f.t, f.x, cfg.lambda, cfg.objective)
                            .map_err(diverged(epoch))?
                    }
                    None => {
                        let l1 = f.tape.mean_abs_diff(f.fake, f.t)?;
                        f.tape.affine(l1, cfg.lambda, 0.0)
                    }
                };
                sum_g += f.tape.scalar(loss);
                sum_l1 += mean_abs(f.tape.value(f.fake), f.tape.value(f.t));
                f.tape.backward(loss)?;
                g_grads.push(g.params.collect_grads(&f.tape, &f.g_vars));
            }
            opt_g.step(&mut g.params, &crate::dpsgd::mean(&g_grads))?;
        }
        let n = proxy.len() as f64;
        let stats = DistillEpoch {
            epoch,
            ds_loss: d.as_ref().map(|_| sum_d / n),
            gs_loss: sum_g / n,
            imitation_l1: sum_l1 / n,
        };
        if !stats.gs_loss.is_finite() || !stats.ds_loss.unwrap_or(0.0).is_finite() || !g.params.all_finite() {
            return Err(Error::Diverged { epoch });
        }
        log.push(stats);
    }
    Ok(DistillOutcome { student: g, log, teacher_queries: teacher.queries() })
}

/// Trains a student against `teacher` with a fresh discriminator.
///
/// `cfg.mode` is ignored; see [`run_distillation`] for mode dispatch.
pub fn akd_train(teacher: &dyn Translator, proxy: &[PairedSample], arch: &CganArch, cfg: &DistillConfig) -> Result<DistillOutcome> {
    distill(teacher, proxy, arch, &DistillConfig { mode: DistillMode::Akd, ..cfg.clone() })
}

/// Trains a student by `lambda * mean|G_s(z,x) - G_t(z,x)|` alone.
pub fn dmp_train(teacher: &dyn Translator, proxy: &[PairedSample], arch: &CganArch, cfg: &DistillConfig) -> Result<DistillOutcome> {
    distill(teacher, proxy, arch, &DistillConfig { mode: DistillMode::Dmp, ..cfg.clone() })
}

pub fn run_distillation(teacher: &dyn Translator, proxy: &[PairedSample], arch: &CganArch, cfg: &DistillConfig) -> Result<DistillOutcome> {
    distill(teacher, proxy, arch, cfg)
}
