//! Paired-image folders.
//!
//! ```text
//! <root>/manifest.json
//! <root>/train/<id>_x.png  <id>_y.png
//! <root>/proxy/<id>_x.png
//! <root>/proxy_vault/<id>_y.png
//! <root>/test/<id>_x.png   <id>_y.png
//! ```
//!
//! Pixels are 8-bit and map linearly to `[-1, 1]` (`v = q / 127.5 - 1`).
//! The vault holds the proxy ground truths that only the leakage audit may
//! read.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use akd_core::data::{DatasetSplits, PairedSample, ProxyVault};
use akd_core::ImageTensor;
use serde::{Deserialize, Serialize};

use crate::error::{format_err, io, Error, Result};

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub train: Vec<String>,
    pub proxy: Vec<String>,
    pub test: Vec<String>,
}

/// Whether a split's samples must, may or must not carry ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Labels {
    Required,
    Forbidden,
    /// Labeled if any `_y.png` is present, in which case all must be.
    Auto,
}

fn to_byte(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

fn from_byte(q: u8) -> f64 {
    q as f64 / 127.5 - 1.0
}

pub fn write_png(img: &ImageTensor, path: &Path) -> Result<()> {
    let color = match img.channels() {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => return Err(format_err(path, format!("cannot store {c}-channel image as PNG"))),
    };
    let [c, h, w] = img.shape();
    let mut data = vec![0u8; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                data[(y * w + x) * c + ch] = to_byte(img.at(ch, y, x));
            }
        }
    }
    let file = File::create(path).map_err(io(path))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let png_err = |e: png::EncodingError| format_err(path, e.to_string());
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(&data).map_err(png_err)?;
    writer.finish().map_err(png_err)
}

pub fn read_png(path: &Path) -> Result<ImageTensor> {
    let file = File::open(path).map_err(io(path))?;
    let mut decoder = png::Decoder::new(file);
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| format_err(path, e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| format_err(path, e.to_string()))?;
    let (stored, kept) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        other => return Err(format_err(path, format!("unsupported PNG color type {other:?}"))),
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let bytes = &buf[..info.buffer_size()];
    let mut values = vec![0.0; kept * h * w];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..kept {
                values[(ch * h + y) * w + x] = from_byte(bytes[(y * w + x) * stored + ch]);
            }
        }
    }
    Ok(ImageTensor::new(kept, h, w, values)?)
}

/// Writes one split directory. Ground truths are read through
/// [`PairedSample::y`] and so show up in the samples' access counters.
pub fn save_split(samples: &[PairedSample], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io(dir))?;
    for s in samples {
        write_png(s.x(), &dir.join(format!("{}_x.png", s.id())))?;
        if let Some(y) = s.y() {
            write_png(y, &dir.join(format!("{}_y.png", s.id())))?;
        }
    }
    Ok(())
}

/// Loads every `<id>_x.png` in `dir`, sorted by id. A missing directory or
/// one without images gives an empty list.
pub fn load_paired_folder(dir: &Path, labels: Labels) -> Result<Vec<PairedSample>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut xs = BTreeMap::new();
    let mut ys = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(io(dir))? {
        let path = entry.map_err(io(dir))?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        if let Some(id) = name.strip_suffix("_x.png") {
            xs.insert(id.to_string(), path.clone());
        } else if let Some(id) = name.strip_suffix("_y.png") {
            ys.insert(id.to_string(), path.clone());
        }
    }
    let labeled = match labels {
        Labels::Required => true,
        Labels::Forbidden => false,
        Labels::Auto => !ys.is_empty(),
    };
    if let Some(id) = ys.keys().find(|id| !xs.contains_key(*id)) {
        return Err(format_err(dir, format!("ground truth `{id}_y.png` has no input image")));
    }
    if !labeled && !ys.is_empty() {
        return Err(format_err(dir, "unlabeled split contains ground-truth images"));
    }
    let mut out = Vec::with_capacity(xs.len());
    for (id, xp) in xs {
        let y = if labeled {
            let yp = ys
                .get(&id)
                .ok_or_else(|| format_err(dir, format!("sample `{id}` has no ground truth (`{id}_y.png` missing)")))?;
            Some(read_png(yp)?)
        } else {
            None
        };
        out.push(PairedSample::new(id, read_png(&xp)?, y)?);
    }
    Ok(out)
}

fn ordered(mut samples: Vec<PairedSample>, ids: &[String], split: &Path) -> Result<Vec<PairedSample>> {
    if samples.len() != ids.len() {
        return Err(format_err(
            split,
            format!("manifest lists {} samples, folder holds {}", ids.len(), samples.len()),
        ));
    }
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let pos = samples
            .iter()
            .position(|s| s.id() == id)
            .ok_or_else(|| format_err(split, format!("manifest id `{id}` not found")))?;
        out.push(samples.swap_remove(pos));
    }
    Ok(out)
}

/// Writes all splits, the proxy vault and `manifest.json`.
pub fn save_dataset(splits: &DatasetSplits, root: &Path) -> Result<()> {
    let first = splits
        .train
        .iter()
        .chain(&splits.proxy)
        .chain(&splits.test)
        .next()
        .ok_or_else(|| Error::Config("cannot save a dataset without samples".into()))?;
    let [channels, height, width] = first.x().shape();
    save_split(&splits.train, &root.join("train"))?;
    save_split(&splits.proxy, &root.join("proxy"))?;
    save_split(&splits.test, &root.join("test"))?;
    let vault_dir = root.join("proxy_vault");
    fs::create_dir_all(&vault_dir).map_err(io(&vault_dir))?;
    for s in &splits.proxy {
        if let Some(labeled) = splits.vault.relabel(s) {
            if let Some(y) = labeled.y() {
                write_png(y, &vault_dir.join(format!("{}_y.png", s.id())))?;
            }
        }
    }
    let ids = |v: &[PairedSample]| v.iter().map(|s| s.id().to_string()).collect();
    let manifest = DatasetManifest {
        format_version: DATASET_FORMAT_VERSION,
        channels,
        height,
        width,
        train: ids(&splits.train),
        proxy: ids(&splits.proxy),
        test: ids(&splits.test),
    };
    let path = root.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(io(&path))
}

pub fn load_dataset(root: &Path) -> Result<DatasetSplits> {
    let path = root.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(io(&path))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    if manifest.format_version != DATASET_FORMAT_VERSION {
        return Err(format_err(&path, format!("unsupported dataset format {}", manifest.format_version)));
    }
    let load = |name: &str, labels, ids: &[String]| {
        let dir = root.join(name);
        ordered(load_paired_folder(&dir, labels)?, ids, &dir)
    };
    let train = load("train", Labels::Required, &manifest.train)?;
    let proxy = load("proxy", Labels::Forbidden, &manifest.proxy)?;
    let test = load("test", Labels::Required, &manifest.test)?;
    let mut vault = ProxyVault::default();
    let vault_dir = root.join("proxy_vault");
    for s in &proxy {
        let p = vault_dir.join(format!("{}_y.png", s.id()));
        if p.exists() {
            vault.insert(s.id().to_string(), read_png(&p)?);
        }
    }
    for (name, split) in [("train", &train), ("proxy", &proxy), ("test", &test)] {
        if let Some(s) = split.iter().find(|s| s.x().shape() != [manifest.channels, manifest.height, manifest.width]) {
            return Err(format_err(root.join(name), format!("sample `{}` has shape {:?}", s.id(), s.x().shape())));
        }
    }
    let splits = DatasetSplits { train, proxy, test, vault };
    splits.validate()?;
    Ok(splits)
}
