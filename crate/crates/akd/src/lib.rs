//! File formats, experiment orchestration and the `akd` command line on top
//! of `akd-core`.

pub mod checkpoint;
pub mod config;
pub mod dataset;
mod error;
pub mod experiment;

pub use error::{Error, Result};
