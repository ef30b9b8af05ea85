//! Generator checkpoints: `manifest.json` plus one little-endian raw file per
//! tensor.
//!
//! Parameters live in `f64`. `float64` files reproduce them bit for bit;
//! `float32` files are smaller and round-trip bit-exactly only for values
//! that were already `f32`-representable.

use std::fs;
use std::path::Path;

use akd_core::{GeneratorArch, GeneratorModel, ParamSet};
use serde::{Deserialize, Serialize};

use crate::error::{format_err, io, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    Float32,
    #[default]
    Float64,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::Float32 => 4,
            Dtype::Float64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub arch: GeneratorArch,
    pub dtype: Dtype,
    pub dropout_active: bool,
    pub tensors: Vec<TensorEntry>,
}

fn encode(values: &[f64], dtype: Dtype) -> Vec<u8> {
    match dtype {
        Dtype::Float32 => values.iter().flat_map(|v| (*v as f32).to_le_bytes()).collect(),
        Dtype::Float64 => values.iter().flat_map(|v| v.to_le_bytes()).collect(),
    }
}

fn decode(bytes: &[u8], dtype: Dtype) -> Vec<f64> {
    match dtype {
        Dtype::Float32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
        Dtype::Float64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect(),
    }
}

pub fn save_generator(g: &GeneratorModel, dir: &Path, dtype: Dtype) -> Result<()> {
    fs::create_dir_all(dir).map_err(io(dir))?;
    let mut tensors = Vec::new();
    for t in g.params.tensors() {
        let file = format!("{}.bin", t.name);
        let path = dir.join(&file);
        fs::write(&path, encode(&t.values, dtype)).map_err(io(&path))?;
        tensors.push(TensorEntry { name: t.name.clone(), shape: t.shape.clone(), file });
    }
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_FORMAT_VERSION,
        arch: g.arch.clone(),
        dtype,
        dropout_active: g.dropout_active,
        tensors,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(io(&path))
}

pub fn load_generator(dir: &Path) -> Result<GeneratorModel> {
    let path = dir.join("manifest.json");
    let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(&path).map_err(io(&path))?)?;
    if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(format_err(&path, format!("unsupported checkpoint format {}", manifest.format_version)));
    }
    let reference = akd_core::nets::init_generator(&manifest.arch, 0)?;
    let mut params = ParamSet::new();
    for (entry, expected) in manifest.tensors.iter().zip(reference.params.tensors()) {
        if entry.name != expected.name || entry.shape != expected.shape {
            return Err(format_err(
                &path,
                format!(
                    "tensor `{}` {:?} does not match the architecture (expected `{}` {:?})",
                    entry.name, entry.shape, expected.name, expected.shape
                ),
            ));
        }
        let file = dir.join(&entry.file);
        let bytes = fs::read(&file).map_err(io(&file))?;
        let n: usize = entry.shape.iter().product();
        if bytes.len() != n * manifest.dtype.width() {
            return Err(format_err(&file, format!("expected {} bytes, found {}", n * manifest.dtype.width(), bytes.len())));
        }
        params.push(entry.name.clone(), entry.shape.clone(), decode(&bytes, manifest.dtype))?;
    }
    if manifest.tensors.len() != reference.params.tensors().len() {
        return Err(format_err(&path, "tensor count does not match the architecture"));
    }
    Ok(GeneratorModel { arch: manifest.arch, params, dropout_active: manifest.dropout_active })
}

/// FNV-1a over the parameter bit patterns, for cheap equality checks.
pub fn params_digest(params: &ParamSet) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for t in params.tensors() {
        for b in t.name.bytes().chain(t.values.iter().flat_map(|v| v.to_bits().to_le_bytes())) {
            h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}
