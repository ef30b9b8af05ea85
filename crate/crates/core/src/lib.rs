//! Training, attacking and defending conditional image-translation models.
//!
//! This crate is `no_std` (with `alloc`) and holds every algorithmic piece:
//! a small reverse-mode autodiff engine over image tensors, the U-Net
//! generator and convolutional discriminator, regular / DP-SGD training,
//! adversarial knowledge distillation (and its L1-only variant), the
//! reconstruction-loss membership-inference attack with ROC evaluation, and
//! the utility metrics (KID, normalized KID, generalization gap, loss
//! histograms). File formats, configuration and orchestration live in the
//! `akd` companion crate.
#![no_std]
// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

#[cfg(feature = "std")]
extern crate std;

pub mod audit;
pub mod autodiff;
pub mod data;
pub mod distill;
pub mod dpsgd;
mod error;
mod kernels;
pub mod metrics;
pub mod mia;
pub mod nets;
pub mod optim;
pub mod rng;
pub mod stats;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use nets::{
    CganArch, DiscriminatorArch, DiscriminatorModel, GeneratorArch, GeneratorModel, ParamSet,
    Translator,
};
pub use rng::RngState;
pub use tensor::ImageTensor;
