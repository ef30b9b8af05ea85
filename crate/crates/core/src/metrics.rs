//! Utility metrics: KID and its normalized form, the generalization gap and
//! reconstruction-loss histograms. Also the Gauss output-perturbation
//! defense, which is a wrapper rather than a training procedure.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::nets::{ParamSet, Translator};
use crate::rng::RngState;
use crate::tensor::ImageTensor;
use crate::{Error, Result};

/// Maps an image to a fixed-length feature vector.
pub trait FeatureMap {
    fn dim(&self) -> usize;
    fn features(&self, img: &ImageTensor) -> Result<Vec<f64>>;
}

/// Frozen, randomly initialized 3-layer conv net with global average pooling.
///
/// Pixels are mapped to `[0, 1]` first, so black coincides with the zero
/// padding. Layers are 3x3, stride 2, padding 1, each followed by ReLU;
/// widths are `d/4`, `d/2`, `d`. First-layer filters are zero-mean, which
/// makes the features respond to structure rather than flat color.
#[derive(Clone, Debug, PartialEq)]
pub struct RandomConvExtractor {
    pub seed: u64,
    pub in_channels: usize,
    pub output_dim: usize,
    params: ParamSet,
}

const FX_KERNEL: usize = 3;

impl RandomConvExtractor {
    pub fn new(seed: u64, in_channels: usize, output_dim: usize) -> Result<Self> {
        if output_dim < 4 || in_channels == 0 {
            return Err(Error::Config(format!(
                "feature extractor needs output_dim >= 4 and in_channels >= 1, got {output_dim} and {in_channels}"
            )));
        }
        let widths = [in_channels, (output_dim / 4).max(1), (output_dim / 2).max(1), output_dim];
        let mut rng = RngState::new(seed).split(0x6678);
        let mut params = ParamSet::new();
        for l in 0..3 {
            let (cin, cout) = (widths[l], widths[l + 1]);
            let fan_in = cin * FX_KERNEL * FX_KERNEL;
            let std = libm::sqrt(2.0 / fan_in as f64);
            let mut w: Vec<f64> = (0..cout * fan_in).map(|_| rng.normal(0.0, std)).collect();
            if l == 0 {
                for filter in w.chunks_mut(fan_in) {
                    let m = filter.iter().sum::<f64>() / fan_in as f64;
                    filter.iter_mut().for_each(|v| *v -= m);
                }
            }
            params.push(format!("fx{l}.weight"), vec![cout, cin, FX_KERNEL, FX_KERNEL], w)?;
            params.push(format!("fx{l}.bias"), vec![cout], vec![0.0; cout])?;
        }
        Ok(Self { seed, in_channels, output_dim, params })
    }
}

impl FeatureMap for RandomConvExtractor {
    fn dim(&self) -> usize {
        self.output_dim
    }

    fn features(&self, img: &ImageTensor) -> Result<Vec<f64>> {
        if img.channels() != self.in_channels {
            return Err(Error::Shape(format!(
                "extractor expects {} channels, image has {}",
                self.in_channels,
                img.channels()
            )));
        }
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false)?;
        let mut h = tape.image(img);
        h = tape.affine(h, 0.5, 0.5);
        for l in 0..3 {
            h = tape.conv2d(h, vars[2 * l], vars[2 * l + 1], 2, 1)?;
            h = tape.relu(h);
        }
        let plane = tape.shape(h)[1] * tape.shape(h)[2];
        Ok(tape.value(h).chunks(plane).map(|c| c.iter().sum::<f64>() / plane as f64).collect())
    }
}

/// Features of every image; all images must share one shape.
pub fn extract_features(images: &[ImageTensor], fx: &dyn FeatureMap) -> Result<Vec<Vec<f64>>> {
    if let Some(img) = images.iter().find(|i| i.shape() != images[0].shape()) {
        return Err(Error::Shape(format!("images of shape {:?} and {:?}", images[0].shape(), img.shape())));
    }
    images.iter().map(|i| fx.features(i)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KidResult {
    /// Unbiased estimate; may be slightly negative.
    pub kid_raw: f64,
    /// `max(kid_raw, 0)`.
    pub kid: f64,
    pub n_real: usize,
    pub n_gen: usize,
}

fn poly_kernel(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
    let t = dot / a.len() as f64 + 1.0;
    t * t * t
}

/// Unbiased MMD^2 with kernel `k(a, b) = (a.b / d + 1)^3`.
pub fn kid(real: &[Vec<f64>], generated: &[Vec<f64>]) -> Result<KidResult> {
    let (n, m) = (real.len(), generated.len());
    if n < 2 || m < 2 {
        return Err(Error::Invalid(format!("KID needs at least 2 vectors per set, got {n} and {m}")));
    }
    let d = real[0].len();
    if d == 0 || real.iter().chain(generated).any(|v| v.len() != d) {
        return Err(Error::Shape("KID feature vectors must share one non-zero length".into()));
    }
    let within = |s: &[Vec<f64>]| {
        let mut acc = 0.0;
        for i in 0..s.len() {
            for j in i + 1..s.len() {
                acc += poly_kernel(&s[i], &s[j]);
            }
        }
        2.0 * acc / (s.len() * (s.len() - 1)) as f64
    };
    let mut across = 0.0;
    for a in real {
        for b in generated {
            across += poly_kernel(a, b);
        }
    }
    let kid_raw = within(real) + within(generated) - 2.0 * across / (n * m) as f64;
    Ok(KidResult { kid_raw, kid: kid_raw.max(0.0), n_real: n, n_gen: m })
}

fn constant_set(reference: &[ImageTensor], value: f64) -> Result<Vec<ImageTensor>> {
    let [c, h, w] = reference[0].shape();
    (0..reference.len()).map(|_| ImageTensor::constant(c, h, w, value)).collect()
}

/// KID between the reference images and as many all-black images.
pub fn calibrate_kid_max(reference: &[ImageTensor], fx: &dyn FeatureMap) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Invalid("KID calibration needs reference images".into()));
    }
    let real = extract_features(reference, fx)?;
    let black = extract_features(&constant_set(reference, -1.0)?, fx)?;
    let k = kid(&real, &black)?.kid;
    if !(k > 0.0) {
        return Err(Error::Invalid(format!("degenerate KID calibration: {k}")));
    }
    Ok(k)
}

/// KIDs of constant images at -1, 0 and 1 against the reference set.
/// Diagnostic only; normalization uses the black-image value.
pub fn constant_image_kids(reference: &[ImageTensor], fx: &dyn FeatureMap) -> Result<[(f64, f64); 3]> {
    if reference.is_empty() {
        return Err(Error::Invalid("KID calibration needs reference images".into()));
    }
    let real = extract_features(reference, fx)?;
    let mut out = [(0.0, 0.0); 3];
    for (slot, v) in out.iter_mut().zip([-1.0, 0.0, 1.0]) {
        let feats = extract_features(&constant_set(reference, v)?, fx)?;
        *slot = (v, kid(&real, &feats)?.kid_raw);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NkidResult {
    /// Percent in `[0, 100]`.
    pub nkid: f64,
    pub kid_max: f64,
    pub kid: KidResult,
}

pub fn nkid_from_kid(kid: KidResult, kid_max: f64) -> Result<NkidResult> {
    if !(kid_max > 0.0) || !kid_max.is_finite() {
        return Err(Error::Invalid(format!("kid_max must be positive and finite, got {kid_max}")));
    }
    Ok(NkidResult { nkid: (100.0 * kid.kid / kid_max).min(100.0), kid_max, kid })
}

/// `100 * KID / kid_max`, capped at 100.
pub fn nkid(generated: &[ImageTensor], reference: &[ImageTensor], fx: &dyn FeatureMap, kid_max: f64) -> Result<NkidResult> {
    let k = kid(&extract_features(reference, fx)?, &extract_features(generated, fx)?)?;
    nkid_from_kid(k, kid_max)
}

/// One stochastic forward per input.
pub fn translate_all(g: &dyn Translator, inputs: &[ImageTensor], noise: &mut RngState) -> Result<Vec<ImageTensor>> {
    inputs.iter().map(|x| g.translate(x, noise)).collect()
}

/// `NKID(test) - NKID(train)`, positive when the model does better on its
/// training inputs.
#[allow(clippy::too_many_arguments)]
pub fn generalization_gap(
    g: &dyn Translator,
    train_inputs: &[ImageTensor],
    test_inputs: &[ImageTensor],
    train_refs: &[ImageTensor],
    test_refs: &[ImageTensor],
    fx: &dyn FeatureMap,
    kid_max: f64,
    noise: &mut RngState,
) -> Result<f64> {
    let train_out = translate_all(g, train_inputs, noise)?;
    let test_out = translate_all(g, test_inputs, noise)?;
    let q_train = nkid(&train_out, train_refs, fx, kid_max)?.nkid;
    let q_test = nkid(&test_out, test_refs, fx, kid_max)?.nkid;
    Ok(q_test - q_train)
}

/// Member and non-member score histograms on shared bins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossHistogram {
    /// `n_bins + 1` edges.
    pub edges: Vec<f64>,
    pub member_p: Vec<f64>,
    pub nonmember_p: Vec<f64>,
    /// `sum_i min(p_i, q_i)`.
    pub overlap: f64,
}

pub fn loss_histogram(members: &[f64], nonmembers: &[f64], n_bins: usize) -> Result<LossHistogram> {
    if n_bins < 2 || members.is_empty() || nonmembers.is_empty() {
        return Err(Error::Invalid(format!(
            "histogram needs n_bins >= 2 and two non-empty lists, got {n_bins} bins, {} and {} scores",
            members.len(),
            nonmembers.len()
        )));
    }
    let all = members.iter().chain(nonmembers);
    if all.clone().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("histogram scores must be finite".into()));
    }
    let lo = all.clone().copied().fold(f64::INFINITY, f64::min);
    let mut hi = all.copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        hi = lo + 1.0;
    }
    let width = (hi - lo) / n_bins as f64;
    let edges: Vec<f64> = (0..=n_bins).map(|i| if i == n_bins { hi } else { lo + i as f64 * width }).collect();
    let bin_of = |v: f64| (((v - lo) / (hi - lo) * n_bins as f64) as usize).min(n_bins - 1);
    let normalized = |s: &[f64]| {
        let mut h = vec![0.0; n_bins];
        for &v in s {
            h[bin_of(v)] += 1.0;
        }
        h.iter_mut().for_each(|c| *c /= s.len() as f64);
        h
    };
    let member_p = normalized(members);
    let nonmember_p = normalized(nonmembers);
    let overlap = member_p.iter().zip(&nonmember_p).map(|(p, q)| p.min(*q)).sum::<f64>().min(1.0);
    Ok(LossHistogram { edges, member_p, nonmember_p, overlap })
}

/// Adds `N(0, sigma^2)` per pixel to the wrapped model's output, then clamps
/// to `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussDefense<T> {
    pub inner: T,
    pub sigma: f64,
}

pub fn gauss_defense<T: Translator>(inner: T, sigma: f64) -> Result<GaussDefense<T>> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::Config(format!("gauss sigma must be finite and >= 0, got {sigma}")));
    }
    Ok(GaussDefense { inner, sigma })
}

impl<T: Translator> Translator for GaussDefense<T> {
    fn translate(&self, x: &ImageTensor, noise: &mut RngState) -> Result<ImageTensor> {
        let out = self.inner.translate(x, noise)?;
        if self.sigma == 0.0 {
            return Ok(out);
        }
        let [c, h, w] = out.shape();
        let values = out.into_values().into_iter().map(|v| v + noise.normal(0.0, self.sigma)).collect();
        ImageTensor::from_clamped(c, h, w, values)
    }
}
