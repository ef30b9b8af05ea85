//! Tape-based reverse-mode differentiation over dense `f64` arrays.
//!
//! Nodes are appended in evaluation order; [`Tape::backward`] walks them in
//! reverse. A node needs a gradient only when one of its inputs does, so
//! frozen networks (the teacher, or the discriminator during a generator
//! step) cost a forward pass plus whatever is needed to reach trainable
//! leaves.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::kernels::{col2im, gemm, im2col, ConvGeom};
use crate::tensor::ImageTensor;
use crate::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
        cols: Option<Vec<f64>>,
    },
    /// `geom` is the forward convolution from output space back to input space.
    ConvTranspose {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
    },
    LeakyRelu { input: Var, slope: f64 },
    Tanh(Var),
    Sigmoid(Var),
    Ln(Var),
    Mask { input: Var, mask: Vec<f64> },
    Concat(Var, Var),
    Clamp { input: Var, lo: f64, hi: f64 },
    Affine { input: Var, mul: f64 },
    Add(Var, Var),
    Mul(Var, Var),
    Sum(Var),
    Mean(Var),
    MeanAbsDiff(Var, Var),
    Quantize,
}

#[derive(Clone, Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Records a computation for reverse-mode differentiation.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node { shape, value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, shape: &[usize], value: Vec<f64>) -> Result<Var> {
        self.leaf(shape, value, false)
    }

    /// A trainable leaf; its gradient is available after [`Tape::backward`].
    pub fn param(&mut self, shape: &[usize], value: Vec<f64>) -> Result<Var> {
        self.leaf(shape, value, true)
    }

    fn leaf(&mut self, shape: &[usize], value: Vec<f64>, requires_grad: bool) -> Result<Var> {
        if numel(shape) != value.len() {
            return Err(Error::Shape(format!(
                "leaf of shape {shape:?} given {} values",
                value.len()
            )));
        }
        Ok(self.push(shape.to_vec(), value, Op::Leaf, requires_grad))
    }

    pub fn image(&mut self, img: &ImageTensor) -> Var {
        self.push(img.shape().to_vec(), img.values().to_vec(), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs(v)
    }

    /// Gradient of the last [`Tape::backward`] target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn is_finite(&self, v: Var) -> bool {
        self.node(v).value.iter().all(|x| x.is_finite())
    }

    fn chw(&self, v: Var, what: &str) -> Result<(usize, usize, usize)> {
        match self.shape(v) {
            [c, h, w] => Ok((*c, *h, *w)),
            s => Err(Error::Shape(format!("{what} expects a CxHxW input, got {s:?}"))),
        }
    }

    /// 2-D convolution. `weight` is `cout x cin x k x k`, `bias` is `cout`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let (cin, h, w) = self.chw(input, "conv2d")?;
        let (cout, k) = match self.shape(weight) {
            [co, ci, k1, k2] if *ci == cin && k1 == k2 => (*co, *k1),
            s => return Err(Error::Shape(format!("conv2d weight {s:?} for {cin} input channels"))),
        };
        if self.shape(bias) != [cout] {
            return Err(Error::Shape(format!("conv2d bias {:?}, expected [{cout}]", self.shape(bias))));
        }
        let geom = ConvGeom::new(cin, h, w, k, stride, pad)
            .ok_or_else(|| Error::Shape(format!("kernel {k} does not fit a {h}x{w} input")))?;
        let n = geom.col_cols();
        let mut cols = vec![0.0; geom.col_rows() * n];
        im2col(self.value(input), &geom, &mut cols);
        let mut out = vec![0.0; cout * n];
        for (co, b) in self.value(bias).iter().enumerate() {
            out[co * n..(co + 1) * n].fill(*b);
        }
        gemm(cout, geom.col_rows(), n, self.value(weight), false, &cols, false, 1.0, &mut out);
        let requires_grad = self.needs(input) || self.needs(weight) || self.needs(bias);
        let keep = if self.needs(weight) { Some(cols) } else { None };
        Ok(self.push(
            vec![cout, geom.ho, geom.wo],
            out,
            Op::Conv { input, weight, bias, geom, cols: keep },
            requires_grad,
        ))
    }

    /// Transposed 2-D convolution. `weight` is `cin x cout x k x k`.
    pub fn conv_transpose2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let (cin, h, w) = self.chw(input, "conv_transpose2d")?;
        let (cout, k) = match self.shape(weight) {
            [ci, co, k1, k2] if *ci == cin && k1 == k2 => (*co, *k1),
            s => {
                return Err(Error::Shape(format!(
                    "conv_transpose2d weight {s:?} for {cin} input channels"
                )))
            }
        };
        if self.shape(bias) != [cout] {
            return Err(Error::Shape(format!(
                "conv_transpose2d bias {:?}, expected [{cout}]",
                self.shape(bias)
            )));
        }
        if stride == 0 || (h - 1) * stride + k < 2 * pad + 1 {
            return Err(Error::Shape(format!("transposed kernel {k} / stride {stride} invalid")));
        }
        let ho = (h - 1) * stride + k - 2 * pad;
        let wo = (w - 1) * stride + k - 2 * pad;
        let geom = ConvGeom::new(cout, ho, wo, k, stride, pad)
            .filter(|g| g.ho == h && g.wo == w)
            .ok_or_else(|| Error::Shape(format!("inconsistent transposed geometry for {h}x{w}")))?;
        let n = h * w;
        let mut cols = vec![0.0; geom.col_rows() * n];
        gemm(geom.col_rows(), cin, n, self.value(weight), true, self.value(input), false, 0.0, &mut cols);
        let mut out = vec![0.0; cout * ho * wo];
        col2im(&cols, &geom, &mut out);
        for (co, b) in self.value(bias).iter().enumerate() {
            for v in &mut out[co * ho * wo..(co + 1) * ho * wo] {
                *v += *b;
            }
        }
        let requires_grad = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(
            vec![cout, ho, wo],
            out,
            Op::ConvTranspose { input, weight, bias, geom },
            requires_grad,
        ))
    }

    fn unary(&mut self, input: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(input).iter().map(|&x| f(x)).collect();
        let shape = self.shape(input).to_vec();
        let rg = self.needs(input);
        self.push(shape, value, op, rg)
    }

    pub fn leaky_relu(&mut self, input: Var, slope: f64) -> Var {
        self.unary(input, |x| if x > 0.0 { x } else { slope * x }, Op::LeakyRelu { input, slope })
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.leaky_relu(input, 0.0)
    }

    pub fn tanh(&mut self, input: Var) -> Var {
        self.unary(input, libm::tanh, Op::Tanh(input))
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.unary(input, sigmoid, Op::Sigmoid(input))
    }

    pub fn ln(&mut self, input: Var) -> Var {
        self.unary(input, libm::log, Op::Ln(input))
    }

    pub fn clamp(&mut self, input: Var, lo: f64, hi: f64) -> Var {
        self.unary(input, |x| x.clamp(lo, hi), Op::Clamp { input, lo, hi })
    }

    /// `mul * x + add`, elementwise.
    pub fn affine(&mut self, input: Var, mul: f64, add: f64) -> Var {
        self.unary(input, |x| mul * x + add, Op::Affine { input, mul })
    }

    /// Rounds to the 8-bit grid of `[-1, 1]`. Forward only.
    pub fn quantize(&mut self, input: Var) -> Var {
        self.unary(
            input,
            |x| libm::round((x.clamp(-1.0, 1.0) + 1.0) * 127.5) / 127.5 - 1.0,
            Op::Quantize,
        )
    }

    /// Elementwise product with a fixed mask (dropout).
    pub fn mask(&mut self, input: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.value(input).len() {
            return Err(Error::Shape(format!(
                "mask of {} elements for {} values",
                mask.len(),
                self.value(input).len()
            )));
        }
        let value = self.value(input).iter().zip(&mask).map(|(a, m)| a * m).collect();
        let shape = self.shape(input).to_vec();
        let rg = self.needs(input);
        Ok(self.push(shape, value, Op::Mask { input, mask }, rg))
    }

    /// Stacks two `C x H x W` arrays along the channel axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ca, ha, wa) = self.chw(a, "concat")?;
        let (cb, hb, wb) = self.chw(b, "concat")?;
        if (ha, wa) != (hb, wb) {
            return Err(Error::Shape(format!("concat of {ha}x{wa} with {hb}x{wb}")));
        }
        let mut value = Vec::with_capacity((ca + cb) * ha * wa);
        value.extend_from_slice(self.value(a));
        value.extend_from_slice(self.value(b));
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(vec![ca + cb, ha, wa], value, Op::Concat(a, b), rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(shape, value, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(shape, value, Op::Mul(a, b), rg))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).iter().sum();
        let rg = self.needs(input);
        self.push(vec![1], vec![s], Op::Sum(input), rg)
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let v = self.value(input);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.needs(input);
        self.push(vec![1], vec![s], Op::Mean(input), rg)
    }

    /// `mean |a - b|` as a scalar.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mean_abs_diff")?;
        let n = self.value(a).len() as f64;
        let s = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| libm::fabs(x - y))
            .sum::<f64>()
            / n;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(vec![1], vec![s], Op::MeanAbsDiff(a, b), rg))
    }

    fn accumulate(&mut self, v: Var, g: &[f64]) {
        if !self.needs(v) {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g.to_vec()),
        }
    }

    fn accumulate_owned(&mut self, v: Var, g: Vec<f64>) {
        if !self.needs(v) {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    /// Differentiates the scalar `loss` with respect to every node that
    /// requires a gradient. Earlier gradients are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.needs(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            let op = core::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            let res = self.backprop_node(i, &op, &g);
            self.nodes[i].op = op;
            self.grads[i] = Some(g);
            res?;
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, op: &Op, g: &[f64]) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Conv { input, weight, bias, geom, cols } => {
                let (input, weight, bias, geom) = (*input, *weight, *bias, *geom);
                let cout = self.shape(weight)[0];
                let n = geom.col_cols();
                let rows = geom.col_rows();
                if self.needs(bias) {
                    let db: Vec<f64> = g.chunks(n).map(|c| c.iter().sum()).collect();
                    self.accumulate_owned(bias, db);
                }
                if self.needs(weight) {
                    let owned;
                    let cols = match cols {
                        Some(c) => c.as_slice(),
                        None => {
                            let mut c = vec![0.0; rows * n];
                            im2col(self.value(input), &geom, &mut c);
                            owned = c;
                            owned.as_slice()
                        }
                    };
                    let mut dw = vec![0.0; cout * rows];
                    gemm(cout, n, rows, g, false, cols, true, 0.0, &mut dw);
                    self.accumulate_owned(weight, dw);
                }
                if self.needs(input) {
                    let mut dcols = vec![0.0; rows * n];
                    gemm(rows, cout, n, self.value(weight), true, g, false, 0.0, &mut dcols);
                    let mut dx = vec![0.0; geom.cin * geom.h * geom.w];
                    col2im(&dcols, &geom, &mut dx);
                    self.accumulate_owned(input, dx);
                }
            }
            Op::ConvTranspose { input, weight, bias, geom } => {
                let (input, weight, bias, geom) = (*input, *weight, *bias, *geom);
                let cin = self.shape(input)[0];
                let n = geom.col_cols();
                let rows = geom.col_rows();
                let plane = geom.h * geom.w;
                if self.needs(bias) {
                    let db: Vec<f64> = g.chunks(plane).map(|c| c.iter().sum()).collect();
                    self.accumulate_owned(bias, db);
                }
                if self.needs(weight) || self.needs(input) {
                    let mut dcols = vec![0.0; rows * n];
                    im2col(g, &geom, &mut dcols);
                    if self.needs(weight) {
                        let mut dw = vec![0.0; cin * rows];
                        gemm(cin, n, rows, self.value(input), false, &dcols, true, 0.0, &mut dw);
                        self.accumulate_owned(weight, dw);
                    }
                    if self.needs(input) {
                        let mut dx = vec![0.0; cin * n];
                        gemm(cin, rows, n, self.value(weight), false, &dcols, false, 0.0, &mut dx);
                        self.accumulate_owned(input, dx);
                    }
                }
            }
            Op::LeakyRelu { input, slope } => {
                let dx = self
                    .value(*input)
                    .iter()
                    .zip(g)
                    .map(|(&x, &gy)| if x > 0.0 { gy } else { slope * gy })
                    .collect();
                self.accumulate_owned(*input, dx);
            }
            Op::Tanh(input) => {
                let dx = self.nodes[i].value.iter().zip(g).map(|(&y, &gy)| gy * (1.0 - y * y)).collect();
                self.accumulate_owned(*input, dx);
            }
            Op::Sigmoid(input) => {
                let dx = self.nodes[i].value.iter().zip(g).map(|(&y, &gy)| gy * y * (1.0 - y)).collect();
                self.accumulate_owned(*input, dx);
            }
            Op::Ln(input) => {
                let dx = self.value(*input).iter().zip(g).map(|(&x, &gy)| gy / x).collect();
                self.accumulate_owned(*input, dx);
            }
            Op::Mask { input, mask } => {
                let dx = mask.iter().zip(g).map(|(m, gy)| m * gy).collect();
                self.accumulate_owned(*input, dx);
            }
            Op::Concat(a, b) => {
                let na = self.value(*a).len();
                let (ga, gb) = g.split_at(na);
                self.accumulate(*a, ga);
                self.accumulate(*b, gb);
            }
            Op::Clamp { input, lo, hi } => {
                let dx = self
                    .value(*input)
                    .iter()
                    .zip(g)
                    .map(|(&x, &gy)| if x < *lo || x > *hi { 0.0 } else { gy })
                    .collect();
                self.accumulate_owned(*input, dx);
            }
            Op::Affine { input, mul } => {
                let dx = g.iter().map(|gy| mul * gy).collect();
                self.accumulate_owned(*input, dx);
            }
            Op::Add(a, b) => {
                self.accumulate(*a, g);
                self.accumulate(*b, g);
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    let da = self.value(b).iter().zip(g).map(|(y, gy)| y * gy).collect();
                    self.accumulate_owned(a, da);
                }
                if self.needs(b) {
                    let db = self.value(a).iter().zip(g).map(|(x, gy)| x * gy).collect();
                    self.accumulate_owned(b, db);
                }
            }
            Op::Sum(input) => {
                let n = self.value(*input).len();
                self.accumulate_owned(*input, vec![g[0]; n]);
            }
            Op::Mean(input) => {
                let n = self.value(*input).len();
                self.accumulate_owned(*input, vec![g[0] / n as f64; n]);
            }
            Op::MeanAbsDiff(a, b) => {
                let (a, b) = (*a, *b);
                let n = self.value(a).len() as f64;
                let s = g[0] / n;
                let da: Vec<f64> = self
                    .value(a)
                    .iter()
                    .zip(self.value(b))
                    .map(|(x, y)| s * sign(x - y))
                    .collect();
                if self.needs(b) {
                    let db = da.iter().map(|v| -v).collect();
                    self.accumulate_owned(b, db);
                }
                self.accumulate_owned(a, da);
            }
            Op::Quantize => return Err(Error::NonDifferentiable { op: "quantize" }),
        }
        Ok(())
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Value and gradient of a scalar function of a list of parameter arrays.
///
/// `loss_fn` receives the tape and one trainable [`Var`] per entry of
/// `params` (each given as `(shape, values)`), and returns the loss node.
pub fn grad<F>(params: &[(Vec<usize>, Vec<f64>)], loss_fn: F) -> Result<(f64, Vec<Vec<f64>>)>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = params
        .iter()
        .map(|(shape, values)| tape.param(shape, values.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = loss_fn(&mut tape, &vars)?;
    tape.backward(loss)?;
    let grads = vars
        .iter()
        .zip(params)
        .map(|(v, (_, values))| {
            tape.grad(*v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; values.len()])
        })
        .collect();
    Ok((tape.scalar(loss), grads))
}
