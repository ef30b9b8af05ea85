//! Paired samples, splits, the synthetic translation task and the attack
//! evaluation set.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicUsize, Ordering};

use crate::rng::RngState;
use crate::tensor::ImageTensor;
use crate::{Error, Result};

/// An input image with an optional ground truth.
///
/// Reads of the ground truth go through [`PairedSample::y`], which counts
/// them; distillation code is audited by checking that the count stays 0.
#[derive(Debug)]
pub struct PairedSample {
    id: String,
    x: ImageTensor,
    y: Option<ImageTensor>,
    label_reads: AtomicUsize,
}

impl Clone for PairedSample {
    fn clone(&self) -> Self {
        Self {
            id: self.id.clone(),
            x: self.x.clone(),
            y: self.y.clone(),
            label_reads: AtomicUsize::new(self.label_reads()),
        }
    }
}

impl PartialEq for PairedSample {
    fn eq(&self, other: &Self) -> bool {
        self.id == other.id && self.x == other.x && self.y == other.y
    }
}

impl PairedSample {
    pub fn new(id: impl Into<String>, x: ImageTensor, y: Option<ImageTensor>) -> Result<Self> {
        let id = id.into();
        if id.is_empty() {
            return Err(Error::Invalid("sample id must not be empty".to_string()));
        }
        if let Some(y) = &y {
            if (y.height(), y.width()) != (x.height(), x.width()) {
                return Err(Error::Shape(format!(
                    "sample `{id}`: x is {}x{}, y is {}x{}",
                    x.height(),
                    x.width(),
                    y.height(),
                    y.width()
                )));
            }
        }
        Ok(Self {
            id,
            x,
            y,
            label_reads: AtomicUsize::new(0),
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn x(&self) -> &ImageTensor {
        &self.x
    }

    /// Ground truth, if any. Every call is counted.
    pub fn y(&self) -> Option<&ImageTensor> {
        self.label_reads.fetch_add(1, Ordering::Relaxed);
        self.y.as_ref()
    }

    pub fn is_labeled(&self) -> bool {
        self.y.is_some()
    }

    /// Number of [`PairedSample::y`] calls so far.
    pub fn label_reads(&self) -> usize {
        self.label_reads.load(Ordering::Relaxed)
    }

    /// Same sample without its ground truth, plus the removed ground truth.
    pub fn strip_label(self) -> (PairedSample, Option<ImageTensor>) {
        let Self { id, x, y, label_reads } = self;
        (PairedSample { id, x, y: None, label_reads }, y)
    }

    pub(crate) fn labeled_y(&self) -> Result<&ImageTensor> {
        self.y()
            .ok_or_else(|| Error::Invalid(format!("sample `{}` has no ground truth", self.id)))
    }
}

/// Ground truths removed from the proxy split. Only the leakage audit reads
/// them; no training entry point accepts a vault.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ProxyVault {
    truths: Vec<(String, ImageTensor)>,
}

impl ProxyVault {
    pub fn len(&self) -> usize {
        self.truths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.truths.is_empty()
    }

    pub fn insert(&mut self, id: String, y: ImageTensor) {
        self.truths.push((id, y));
    }

    /// Re-pairs an unlabeled proxy sample with its quarantined ground truth.
    pub fn relabel(&self, sample: &PairedSample) -> Option<PairedSample> {
        let (_, y) = self.truths.iter().find(|(id, _)| id == sample.id())?;
        PairedSample::new(sample.id(), sample.x().clone(), Some(y.clone())).ok()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetSplits {
    pub train: Vec<PairedSample>,
    pub proxy: Vec<PairedSample>,
    pub test: Vec<PairedSample>,
    pub vault: ProxyVault,
}

impl DatasetSplits {
    /// Checks id-disjointness and the labeling rules.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (name, split) in [("train", &self.train), ("proxy", &self.proxy), ("test", &self.test)] {
            for s in split {
                if !seen.insert(s.id()) {
                    return Err(Error::Invalid(format!("sample id `{}` appears twice ({name})", s.id())));
                }
                let labeled = s.is_labeled();
                if (name == "proxy") == labeled {
                    return Err(Error::Invalid(format!(
                        "{name} sample `{}` {} a ground truth",
                        s.id(),
                        if labeled { "carries" } else { "lacks" }
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Equal-sized member / non-member samples for the attack.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackEvalSet {
    pub members: Vec<PairedSample>,
    pub nonmembers: Vec<PairedSample>,
}

impl AttackEvalSet {
    pub fn new(members: Vec<PairedSample>, nonmembers: Vec<PairedSample>) -> Result<Self> {
        if members.len() != nonmembers.len() || members.is_empty() {
            return Err(Error::Config(format!(
                "attack set needs equal non-zero sizes, got {} members and {} non-members",
                members.len(),
                nonmembers.len()
            )));
        }
        if members.iter().chain(&nonmembers).any(|s| !s.is_labeled()) {
            return Err(Error::Invalid("attack samples must carry ground truth".to_string()));
        }
        Ok(Self { members, nonmembers })
    }

    pub fn len(&self) -> usize {
        self.members.len() + self.nonmembers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Shuffles `samples` and cuts train / proxy / test. Proxy ground truths go to
/// the vault.
pub fn make_splits(
    samples: &[PairedSample],
    n_train: usize,
    n_proxy: usize,
    n_test: usize,
    seed: u64,
) -> Result<DatasetSplits> {
    let needed = n_train + n_proxy + n_test;
    if needed > samples.len() {
        return Err(Error::Config(format!(
            "splits need {needed} samples, only {} available",
            samples.len()
        )));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    RngState::new(seed).split(0x7370_6c74).shuffle(&mut order);
    let pick = |range: core::ops::Range<usize>| -> Vec<PairedSample> {
        order[range].iter().map(|&i| samples[i].clone()).collect()
    };
    let train = pick(0..n_train);
    let test = pick(n_train + n_proxy..needed);
    let mut vault = ProxyVault::default();
    let mut proxy = Vec::with_capacity(n_proxy);
    for s in pick(n_train..n_train + n_proxy) {
        let (s, y) = s.strip_label();
        if let Some(y) = y {
            vault.insert(s.id().to_string(), y);
        }
        proxy.push(s);
    }
    let splits = DatasetSplits { train, proxy, test, vault };
    splits.validate()?;
    Ok(splits)
}

/// Non-members are the whole test split; members are as many train samples,
/// drawn uniformly without replacement.
pub fn build_attack_set(splits: &DatasetSplits, seed: u64) -> Result<AttackEvalSet> {
    let n = splits.test.len();
    if n == 0 {
        return Err(Error::Config("attack set needs at least one test sample".to_string()));
    }
    if splits.train.len() < n {
        return Err(Error::Config(format!(
            "{} training samples cannot match {} non-members",
            splits.train.len(),
            n
        )));
    }
    let mut order: Vec<usize> = (0..splits.train.len()).collect();
    RngState::new(seed).split(0x6d65_6d62).shuffle(&mut order);
    let members = order[..n].iter().map(|&i| splits.train[i].clone()).collect();
    AttackEvalSet::new(members, splits.test.clone())
}

/// Knobs of the synthetic label-map to photo task.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTask {
    pub channels: usize,
    pub n_classes: usize,
    pub min_rects: usize,
    pub max_rects: usize,
    /// Peak amplitude of the per-class texture.
    pub texture_amplitude: f64,
    /// Peak amplitude of the per-image shading field.
    pub shading_amplitude: f64,
}

impl Default for SyntheticTask {
    fn default() -> Self {
        Self {
            channels: 3,
            n_classes: 4,
            min_rects: 2,
            max_rects: 5,
            texture_amplitude: 0.2,
            shading_amplitude: 0.35,
        }
    }
}

// Flat label-map colours (input domain), background first.
const LABEL_PALETTE: [[f64; 3]; 7] = [
    [-1.0, -1.0, 0.6],
    [1.0, -1.0, -1.0],
    [-1.0, 1.0, -1.0],
    [1.0, 1.0, -1.0],
    [-1.0, 1.0, 1.0],
    [1.0, -1.0, 1.0],
    [1.0, 1.0, 1.0],
];

// Rendered base colours (output domain), background first.
const PHOTO_PALETTE: [[f64; 3]; 7] = [
    [0.1, 0.0, -0.2],
    [-0.5, -0.3, -0.4],
    [0.5, 0.35, 0.1],
    [-0.2, 0.3, 0.55],
    [0.6, -0.1, -0.3],
    [-0.4, 0.5, -0.2],
    [0.3, 0.3, 0.3],
];

fn quantize(v: f64) -> f64 {
    libm::round((v.clamp(-1.0, 1.0) + 1.0) * 127.5) / 127.5 - 1.0
}

fn fnv1a(bytes: impl Iterator<Item = u8>) -> u64 {
    bytes.fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn texture(class: usize, y: usize, x: usize) -> f64 {
    match class % 5 {
        0 => 0.0,
        1 => if (y / 2).is_multiple_of(2) { 1.0 } else { -1.0 },
        2 => if (x / 2).is_multiple_of(2) { 1.0 } else { -1.0 },
        3 => if (x + y).is_multiple_of(2) { 1.0 } else { -1.0 },
        _ => if ((x + y) / 2).is_multiple_of(2) { 1.0 } else { -1.0 },
    }
}

impl SyntheticTask {
    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        if h < 8 || w < 8 {
            return Err(Error::Config(format!("synthetic images must be at least 8x8, got {h}x{w}")));
        }
        if self.channels != 3 {
            return Err(Error::Config("synthetic task renders RGB images".to_string()));
        }
        if self.n_classes == 0 || self.n_classes >= LABEL_PALETTE.len() {
            return Err(Error::Config(format!("n_classes must be in 1..{}", LABEL_PALETTE.len())));
        }
        if self.min_rects == 0 || self.min_rects > self.max_rects {
            return Err(Error::Config("rectangle count range is empty".to_string()));
        }
        Ok(())
    }

    /// Renders the output image for a class map. The shading field is a
    /// function of a hash of the label image, so `x` fully determines `y`.
    fn render(&self, classes: &[usize], x: &ImageTensor, h: usize, w: usize) -> Result<ImageTensor> {
        let digest = fnv1a(x.values().iter().map(|v| libm::round((v + 1.0) * 127.5) as u8));
        let mut shade_rng = RngState::new(digest);
        let amp = self.shading_amplitude;
        let offset: [f64; 3] = core::array::from_fn(|_| amp * (2.0 * shade_rng.uniform() - 1.0));
        let gy = amp * (2.0 * shade_rng.uniform() - 1.0);
        let gx = amp * (2.0 * shade_rng.uniform() - 1.0);
        let mut values = vec![0.0; 3 * h * w];
        for c in 0..3 {
            for py in 0..h {
                for px in 0..w {
                    let class = classes[py * w + px];
                    let u = py as f64 / (h - 1) as f64 - 0.5;
                    let v = px as f64 / (w - 1) as f64 - 0.5;
                    let base = PHOTO_PALETTE[class][c];
                    let tex = self.texture_amplitude * texture(class, py, px);
                    let shade = offset[c] * 0.5 + gy * u + gx * v;
                    values[(c * h + py) * w + px] = quantize(base + tex + shade);
                }
            }
        }
        ImageTensor::new(3, h, w, values)
    }

    pub fn generate(&self, seed: u64, n: usize, h: usize, w: usize) -> Result<Vec<PairedSample>> {
        self.validate(h, w)?;
        if n == 0 {
            return Err(Error::Config("synthetic task needs n >= 1".to_string()));
        }
        let base = RngState::new(seed);
        (0..n)
            .map(|i| {
                let mut rng = base.split(i as u64);
                let mut classes = vec![0usize; h * w];
                let count = rng.range(self.min_rects, self.max_rects + 1);
                for _ in 0..count {
                    let class = rng.range(1, self.n_classes + 1);
                    let rh = rng.range((h / 4).max(3), h / 2 + 2);
                    let rw = rng.range((w / 4).max(3), w / 2 + 2);
                    let y0 = rng.range(0, h - rh + 1);
                    let x0 = rng.range(0, w - rw + 1);
                    for py in y0..y0 + rh {
                        classes[py * w + x0..py * w + x0 + rw].fill(class);
                    }
                }
                let mut xv = vec![0.0; 3 * h * w];
                for c in 0..3 {
                    for p in 0..h * w {
                        xv[c * h * w + p] = LABEL_PALETTE[classes[p]][c];
                    }
                }
                let x = ImageTensor::new(3, h, w, xv)?;
                let y = self.render(&classes, &x, h, w)?;
                PairedSample::new(format!("syn{seed}-{i:05}"), x, Some(y))
            })
            .collect()
    }
}

/// Label-map / rendered-photo pairs with the default task settings.
pub fn generate_synthetic_task(seed: u64, n: usize, h: usize, w: usize) -> Result<Vec<PairedSample>> {
    SyntheticTask::default().generate(seed, n, h, w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_deterministic_and_seed_sensitive() {
        let a = generate_synthetic_task(7, 2, 16, 16).unwrap();
        let b = generate_synthetic_task(7, 2, 16, 16).unwrap();
        let c = generate_synthetic_task(8, 2, 16, 16).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0].x(), c[0].x());
        for s in &a {
            let y = s.y().unwrap();
            assert!(s.x().min() >= -1.0 && s.x().max() <= 1.0);
            assert!(y.min() >= -1.0 && y.max() <= 1.0);
        }
    }

    #[test]
    fn synthetic_rejects_tiny_images() {
        assert!(matches!(generate_synthetic_task(0, 1, 4, 16), Err(Error::Config(_))));
        assert!(generate_synthetic_task(0, 0, 16, 16).is_err());
    }

    #[test]
    fn x_determines_y() {
        // Rendering the same class map twice yields the same photo.
        let task = SyntheticTask::default();
        let s = &task.generate(3, 1, 16, 16).unwrap()[0];
        let again = &task.generate(3, 1, 16, 16).unwrap()[0];
        assert_eq!(s.y(), again.y());
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let samples = generate_synthetic_task(1, 303, 8, 8).unwrap();
        let s = make_splits(&samples, 200, 50, 53, 4).unwrap();
        assert_eq!((s.train.len(), s.proxy.len(), s.test.len()), (200, 50, 53));
        assert!(s.proxy.iter().all(|p| !p.is_labeled()));
        assert_eq!(s.vault.len(), 50);
        s.validate().unwrap();
        let again = make_splits(&samples, 200, 50, 53, 4).unwrap();
        assert_eq!(s, again);
        let empty_proxy = make_splits(&samples, 200, 0, 53, 4).unwrap();
        assert!(empty_proxy.proxy.is_empty());
        assert_eq!(empty_proxy.train.len(), 200);
        assert!(matches!(make_splits(&samples, 300, 50, 53, 4), Err(Error::Config(_))));
    }

    #[test]
    fn attack_set_balances_members() {
        let samples = generate_synthetic_task(1, 303, 8, 8).unwrap();
        let s = make_splits(&samples, 200, 50, 53, 4).unwrap();
        let a = build_attack_set(&s, 9).unwrap();
        assert_eq!((a.members.len(), a.nonmembers.len()), (53, 53));
        assert_eq!(a, build_attack_set(&s, 9).unwrap());
        let train_ids: BTreeSet<&str> = s.train.iter().map(|x| x.id()).collect();
        assert!(a.members.iter().all(|m| train_ids.contains(m.id())));
        assert_eq!(a.nonmembers, s.test);

        let small = make_splits(&samples, 10, 0, 20, 4).unwrap();
        assert!(matches!(build_attack_set(&small, 0), Err(Error::Config(_))));
    }

    #[test]
    fn label_reads_are_counted() {
        let s = generate_synthetic_task(1, 1, 8, 8).unwrap().remove(0);
        assert_eq!(s.label_reads(), 0);
        let _ = s.y();
        let _ = s.y();
        assert_eq!(s.label_reads(), 2);
        let (stripped, y) = s.strip_label();
        assert!(y.is_some());
        assert!(!stripped.is_labeled());
    }

    #[test]
    fn vault_relabels_proxy() {
        let samples = generate_synthetic_task(2, 20, 8, 8).unwrap();
        let s = make_splits(&samples, 10, 5, 5, 1).unwrap();
        let p = &s.proxy[0];
        let full = s.vault.relabel(p).unwrap();
        let original = samples.iter().find(|o| o.id() == p.id()).unwrap();
        assert_eq!(&full, original);
    }
}
