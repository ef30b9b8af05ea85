//! U-Net generator and convolutional discriminator.
//!
//! The generator is a U-Net: `depth` stride-2 encoder convolutions, mirrored
//! by transposed convolutions whose outputs are concatenated with the encoder
//! activation of the same resolution. Dropout in the two innermost decoder
//! blocks is the generator's noise input and stays active at inference, so
//! every forward pass takes an [`RngState`].
//!
//! The discriminator sees the channel-concatenation of a candidate output and
//! the conditioning input and returns one probability for the whole image.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::rng::RngState;
use crate::tensor::ImageTensor;
use crate::{Error, Result};

/// Probabilities are kept inside `[EPS, 1 - EPS]` before any logarithm.
pub const PROB_EPS: f64 = 1e-7;

const LRELU_SLOPE: f64 = 0.2;
const KERNEL: usize = 4;

/// One named parameter array.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Ordered collection of named parameter arrays.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet {
    tensors: Vec<NamedTensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> Result<()> {
        let name = name.into();
        if shape.iter().product::<usize>() != values.len() {
            return Err(Error::Shape(format!("tensor `{name}` shape {shape:?} vs {} values", values.len())));
        }
        if self.tensors.iter().any(|t| t.name == name) {
            return Err(Error::Config(format!("duplicate tensor name `{name}`")));
        }
        self.tensors.push(NamedTensor { name, shape, values });
        Ok(())
    }

    pub fn tensors(&self) -> &[NamedTensor] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(|t| t.values.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.values.iter().copied()).collect()
    }

    /// Overwrites all values from a flat vector in declaration order.
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Shape(format!("{} values for {} parameters", flat.len(), self.num_params())));
        }
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.values.len();
            t.values.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(usize, &mut f64)) {
        let mut idx = 0;
        for t in &mut self.tensors {
            for v in &mut t.values {
                f(idx, v);
                idx += 1;
            }
        }
    }

    /// Places every tensor on the tape, trainable or constant.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<Vec<Var>> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(&t.shape, t.values.clone())
                } else {
                    tape.constant(&t.shape, t.values.clone())
                }
            })
            .collect()
    }

    /// Concatenated gradients of `vars` (zeros where no gradient reached).
    pub fn collect_grads(&self, tape: &Tape, vars: &[Var]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (t, v) in self.tensors.iter().zip(vars) {
            match tape.grad(*v) {
                Some(g) => out.extend_from_slice(g),
                None => out.extend(core::iter::repeat_n(0.0, t.values.len())),
            }
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.values.iter().all(|v| v.is_finite()))
    }
}

/// Anything that maps an input image plus a noise draw to an output image.
///
/// This is the only view of a teacher that distillation gets: queries, not
/// parameters.
pub trait Translator {
    fn translate(&self, x: &ImageTensor, noise: &mut RngState) -> Result<ImageTensor>;
}

impl<T: Translator + ?Sized> Translator for &T {
    fn translate(&self, x: &ImageTensor, noise: &mut RngState) -> Result<ImageTensor> {
        (**self).translate(x, noise)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorArch {
    pub image_size: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Number of stride-2 downsamplings.
    pub depth: usize,
    pub base_channels: usize,
    /// Drop probability in the two innermost decoder blocks.
    pub dropout: f64,
}

impl Default for GeneratorArch {
    fn default() -> Self {
        Self {
            image_size: 32,
            in_channels: 3,
            out_channels: 3,
            depth: 3,
            base_channels: 16,
            dropout: 0.5,
        }
    }
}

impl GeneratorArch {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.base_channels == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("generator depth and channel counts must be positive".to_string()));
        }
        if self.depth >= usize::BITS as usize
            || self.image_size >> self.depth == 0
            || !self.image_size.is_multiple_of(1 << self.depth)
        {
            return Err(Error::Config(format!(
                "{} stride-2 downsamplings do not fit a {}x{} image",
                self.depth, self.image_size, self.image_size
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    fn level_channels(&self, level: usize) -> usize {
        self.base_channels << level.min(3)
    }

    fn decoder_has_dropout(&self, level: usize) -> bool {
        // Decoder blocks are indexed by the encoder level they come from;
        // the two innermost are depth-1 and depth-2.
        level + 2 >= self.depth && level >= 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorModel {
    pub arch: GeneratorArch,
    pub params: ParamSet,
    /// Dropout noise on every forward pass, including inference.
    pub dropout_active: bool,
}

fn init_conv(
    params: &mut ParamSet,
    rng: &mut RngState,
    name: &str,
    shape: [usize; 4],
    fan_in: usize,
) -> Result<()> {
    let std = libm::sqrt(1.0 / fan_in as f64);
    let n: usize = shape.iter().product();
    let w = (0..n).map(|_| rng.normal(0.0, std)).collect();
    params.push(format!("{name}.weight"), shape.to_vec(), w)?;
    let bias_len = if name.starts_with("dec") { shape[1] } else { shape[0] };
    params.push(format!("{name}.bias"), vec![bias_len], vec![0.0; bias_len])
}

pub fn init_generator(arch: &GeneratorArch, seed: u64) -> Result<GeneratorModel> {
    arch.validate()?;
    let mut rng = RngState::new(seed).split(0x6E6E_6765);
    let mut params = ParamSet::new();
    let k2 = KERNEL * KERNEL;
    for level in 0..arch.depth {
        let cin = if level == 0 { arch.in_channels } else { arch.level_channels(level - 1) };
        let cout = arch.level_channels(level);
        init_conv(&mut params, &mut rng, &format!("enc{level}"), [cout, cin, KERNEL, KERNEL], cin * k2)?;
    }
    for level in (0..arch.depth).rev() {
        let cin = if level + 1 == arch.depth {
            arch.level_channels(level)
        } else {
            2 * arch.level_channels(level)
        };
        let cout = if level == 0 { arch.out_channels } else { arch.level_channels(level - 1) };
        // Each output pixel of a stride-2 transposed conv sees cin * k^2 / 4 taps.
        init_conv(&mut params, &mut rng, &format!("dec{level}"), [cin, cout, KERNEL, KERNEL], cin * k2 / 4)?;
    }
    Ok(GeneratorModel {
        arch: arch.clone(),
        params,
        dropout_active: true,
    })
}

fn check_finite(tape: &Tape, v: Var, layer: &str) -> Result<()> {
    if tape.is_finite(v) {
        Ok(())
    } else {
        Err(Error::NumericFailure { layer: layer.to_string() })
    }
}

fn dropout_mask(n: usize, p: f64, rng: &mut RngState) -> Vec<f64> {
    let keep = 1.0 / (1.0 - p);
    (0..n).map(|_| if rng.uniform() < p { 0.0 } else { keep }).collect()
}

impl GeneratorModel {
    /// Records the forward pass. `vars` comes from `self.params.bind`.
    pub fn forward_on(&self, tape: &mut Tape, vars: &[Var], x: Var, noise: &mut RngState) -> Result<Var> {
        let a = &self.arch;
        let expected = [a.in_channels, a.image_size, a.image_size];
        if tape.shape(x) != expected {
            return Err(Error::Shape(format!("generator input {:?}, expected {expected:?}", tape.shape(x))));
        }
        let mut skips = Vec::with_capacity(a.depth);
        let mut h = x;
        for level in 0..a.depth {
            if level > 0 {
                h = tape.leaky_relu(h, LRELU_SLOPE);
            }
            h = tape.conv2d(h, vars[2 * level], vars[2 * level + 1], 2, 1)?;
            check_finite(tape, h, &format!("enc{level}"))?;
            skips.push(h);
        }
        for (i, level) in (0..a.depth).rev().enumerate() {
            let pi = 2 * (a.depth + i);
            h = tape.relu(h);
            h = tape.conv_transpose2d(h, vars[pi], vars[pi + 1], 2, 1)?;
            check_finite(tape, h, &format!("dec{level}"))?;
            if level == 0 {
                break;
            }
            if self.dropout_active && a.dropout > 0.0 && a.decoder_has_dropout(level) {
                let mask = dropout_mask(tape.value(h).len(), a.dropout, noise);
                h = tape.mask(h, mask)?;
            }
            h = tape.concat(h, skips[level - 1])?;
        }
        Ok(tape.tanh(h))
    }

    pub fn num_params(&self) -> usize {
        self.params.num_params()
    }
}

impl Translator for GeneratorModel {
    fn translate(&self, x: &ImageTensor, noise: &mut RngState) -> Result<ImageTensor> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false)?;
        let xv = tape.image(x);
        let out = self.forward_on(&mut tape, &vars, xv, noise)?;
        let [c, h, w] = [self.arch.out_channels, self.arch.image_size, self.arch.image_size];
        ImageTensor::new(c, h, w, tape.value(out).to_vec())
    }
}

/// `G(z, x)`: one stochastic forward pass of the generator.
pub fn gen_forward(g: &GeneratorModel, x: &ImageTensor, noise: &mut RngState) -> Result<ImageTensor> {
    g.translate(x, noise)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorArch {
    pub image_size: usize,
    /// Channels of one image; the network sees twice as many.
    pub channels: usize,
    pub base_channels: usize,
}

impl Default for DiscriminatorArch {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            base_channels: 16,
        }
    }
}

impl DiscriminatorArch {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 || !self.image_size.is_multiple_of(8) {
            return Err(Error::Config(format!(
                "discriminator needs an image size divisible by 8, got {}",
                self.image_size
            )));
        }
        if self.channels == 0 || self.base_channels == 0 {
            return Err(Error::Config("discriminator channel counts must be positive".to_string()));
        }
        Ok(())
    }
}

/// Four convolutions and a sigmoid head.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorModel {
    pub arch: DiscriminatorArch,
    pub params: ParamSet,
}

pub fn init_discriminator(arch: &DiscriminatorArch, seed: u64) -> Result<DiscriminatorModel> {
    arch.validate()?;
    let mut rng = RngState::new(seed).split(0x6469_7363);
    let mut params = ParamSet::new();
    let b = arch.base_channels;
    let chans = [2 * arch.channels, b, 2 * b, 4 * b];
    for layer in 0..3 {
        init_conv(
            &mut params,
            &mut rng,
            &format!("conv{layer}"),
            [chans[layer + 1], chans[layer], KERNEL, KERNEL],
            chans[layer] * KERNEL * KERNEL,
        )?;
    }
    let k = arch.image_size / 8;
    init_conv(&mut params, &mut rng, "conv3", [1, 4 * b, k, k], 4 * b * k * k)?;
    Ok(DiscriminatorModel { arch: arch.clone(), params })
}

impl DiscriminatorModel {
    /// Records `D(candidate, x)` and returns the clamped probability node.
    pub fn forward_on(&self, tape: &mut Tape, vars: &[Var], candidate: Var, x: Var) -> Result<Var> {
        let a = &self.arch;
        let expected = [a.channels, a.image_size, a.image_size];
        if tape.shape(candidate) != expected || tape.shape(x) != expected {
            return Err(Error::Shape(format!(
                "discriminator inputs {:?} and {:?}, expected {expected:?}",
                tape.shape(candidate),
                tape.shape(x)
            )));
        }
        let mut h = tape.concat(candidate, x)?;
        for layer in 0..3 {
            h = tape.conv2d(h, vars[2 * layer], vars[2 * layer + 1], 2, 1)?;
            h = tape.leaky_relu(h, LRELU_SLOPE);
            check_finite(tape, h, &format!("conv{layer}"))?;
        }
        let logit = tape.conv2d(h, vars[6], vars[7], 1, 0)?;
        check_finite(tape, logit, "conv3")?;
        let p = tape.sigmoid(logit);
        Ok(tape.clamp(p, PROB_EPS, 1.0 - PROB_EPS))
    }
}

/// `D(candidate, x)`, a probability in `[1e-7, 1 - 1e-7]`.
pub fn disc_forward(d: &DiscriminatorModel, candidate: &ImageTensor, x: &ImageTensor) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = d.params.bind(&mut tape, false)?;
    let c = tape.image(candidate);
    let xv = tape.image(x);
    let p = d.forward_on(&mut tape, &vars, c, xv)?;
    Ok(tape.scalar(p))
}

/// Generator and discriminator architectures trained together.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CganArch {
    pub generator: GeneratorArch,
    pub discriminator: DiscriminatorArch,
}

impl CganArch {
    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.discriminator.validate()?;
        let g = &self.generator;
        let d = &self.discriminator;
        if g.image_size != d.image_size || g.out_channels != d.channels || g.in_channels != d.channels {
            return Err(Error::Config(
                "discriminator must see images of the generator's input and output shape".to_string(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(seed: u64, arch: &GeneratorArch) -> ImageTensor {
        let mut r = RngState::new(seed);
        let n = arch.in_channels * arch.image_size * arch.image_size;
        ImageTensor::new(
            arch.in_channels,
            arch.image_size,
            arch.image_size,
            (0..n).map(|_| r.uniform() * 2.0 - 1.0).collect(),
        )
        .unwrap()
    }

    fn small() -> GeneratorArch {
        GeneratorArch {
            image_size: 16,
            base_channels: 4,
            ..GeneratorArch::default()
        }
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = init_generator(&GeneratorArch::default(), 1).unwrap();
        let b = init_generator(&GeneratorArch::default(), 1).unwrap();
        let c = init_generator(&GeneratorArch::default(), 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params, c.params);
        assert!(a.params.all_finite());
        let d1 = init_discriminator(&DiscriminatorArch::default(), 1).unwrap();
        let d2 = init_discriminator(&DiscriminatorArch::default(), 1).unwrap();
        let d3 = init_discriminator(&DiscriminatorArch::default(), 3).unwrap();
        assert_eq!(d1, d2);
        assert_ne!(d1.params, d3.params);
    }

    #[test]
    fn too_deep_for_image_is_rejected() {
        let arch = GeneratorArch { depth: 6, ..GeneratorArch::default() };
        assert!(matches!(init_generator(&arch, 0), Err(Error::Config(_))));
        let ok = GeneratorArch { depth: 5, ..GeneratorArch::default() };
        let g = init_generator(&ok, 0).unwrap();
        let x = input(1, &ok);
        let y = gen_forward(&g, &x, &mut RngState::new(0)).unwrap();
        assert_eq!(y.shape(), x.shape());
        let bad_d = DiscriminatorArch { image_size: 12, ..DiscriminatorArch::default() };
        assert!(init_discriminator(&bad_d, 0).is_err());
    }

    #[test]
    fn generator_shape_range_and_noise() {
        let arch = small();
        let g = init_generator(&arch, 3).unwrap();
        let x = input(4, &arch);
        let rng = RngState::new(9);
        let a = gen_forward(&g, &x, &mut rng.clone()).unwrap();
        let b = gen_forward(&g, &x, &mut rng.clone()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), x.shape());
        assert!(a.min() >= -1.0 && a.max() <= 1.0);
        let mut r = rng.clone();
        let c = gen_forward(&g, &x, &mut r).unwrap();
        let d = gen_forward(&g, &x, &mut r).unwrap();
        assert_ne!(c, d, "fresh dropout draws must change the output");
    }

    #[test]
    fn zero_dropout_ignores_rng() {
        let arch = GeneratorArch { dropout: 0.0, ..small() };
        let g = init_generator(&arch, 3).unwrap();
        let x = input(4, &arch);
        let a = gen_forward(&g, &x, &mut RngState::new(1)).unwrap();
        let b = gen_forward(&g, &x, &mut RngState::new(2)).unwrap();
        assert_eq!(a.values(), b.values());
    }

    #[test]
    fn generator_rejects_wrong_input_shape() {
        let g = init_generator(&small(), 0).unwrap();
        let x = ImageTensor::constant(3, 8, 8, 0.0).unwrap();
        assert!(matches!(gen_forward(&g, &x, &mut RngState::new(0)), Err(Error::Shape(_))));
    }

    #[test]
    fn discriminator_probability_is_open_interval() {
        let arch = DiscriminatorArch { image_size: 16, base_channels: 4, ..DiscriminatorArch::default() };
        let d = init_discriminator(&arch, 0).unwrap();
        let ga = small();
        let x = input(1, &ga);
        let y = input(2, &ga);
        let p = disc_forward(&d, &y, &x).unwrap();
        assert!(p > 0.0 && p < 1.0);
        assert_eq!(p, disc_forward(&d, &y, &x).unwrap());

        // Saturate the head: huge bias drives the sigmoid to exactly 1.0.
        let mut sat = d.clone();
        let mut flat = sat.params.flatten();
        let n = flat.len();
        flat[n - 1] = 1e6;
        sat.params.assign_flat(&flat).unwrap();
        let p = disc_forward(&sat, &y, &x).unwrap();
        assert_eq!(p, 1.0 - PROB_EPS);
        flat[n - 1] = -1e6;
        sat.params.assign_flat(&flat).unwrap();
        assert_eq!(disc_forward(&sat, &y, &x).unwrap(), PROB_EPS);

        let wrong = ImageTensor::constant(3, 8, 8, 0.0).unwrap();
        assert!(disc_forward(&d, &wrong, &x).is_err());
    }

    #[test]
    fn stochasticity_contract() {
        let arch = small();
        let x = input(5, &arch);
        for (p, expect_var) in [(0.5, true), (0.0, false)] {
            let g = init_generator(&GeneratorArch { dropout: p, ..arch.clone() }, 1).unwrap();
            let mut r = RngState::new(77);
            let outs: Vec<ImageTensor> = (0..32).map(|_| gen_forward(&g, &x, &mut r).unwrap()).collect();
            let max_var = (0..x.len())
                .map(|i| {
                    let m = outs.iter().map(|o| o.values()[i]).sum::<f64>() / 32.0;
                    outs.iter().map(|o| (o.values()[i] - m).powi(2)).sum::<f64>() / 32.0
                })
                .fold(0.0, f64::max);
            assert_eq!(max_var > 1e-20, expect_var, "p = {p}");
            assert_eq!(outs.iter().all(|o| *o == outs[0]), !expect_var);
        }
    }
}
