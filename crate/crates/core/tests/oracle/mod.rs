//! Straight-line re-evaluations of the networks and losses, shared by the
//! oracle tests and the acceptance harness.

#![allow(dead_code)]

use akd_core::autodiff::Tape;
use akd_core::data::generate_synthetic_task;
use akd_core::distill::{student_d_loss, student_g_loss};
use akd_core::nets::{init_discriminator, init_generator, DiscriminatorArch, GeneratorArch};
use akd_core::train::{d_loss, discriminator_objective, g_loss, generator_objective, GeneratorObjective};
use akd_core::{CganArch, DiscriminatorModel, GeneratorModel, ImageTensor, ParamSet, RngState};


pub struct Map {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub v: Vec<f64>,
}

pub fn weight<'a>(p: &'a ParamSet, name: &str) -> &'a [f64] {
    &p.get(name).unwrap_or_else(|| panic!("missing {name}")).values
}

pub fn conv(x: &Map, wt: &[f64], b: &[f64], cout: usize, k: usize, stride: usize, pad: usize) -> Map {
    let ho = (x.h + 2 * pad - k) / stride + 1;
    let wo = (x.w + 2 * pad - k) / stride + 1;
    let mut v = vec![0.0; cout * ho * wo];
    for co in 0..cout {
        for i in 0..ho {
            for j in 0..wo {
                let mut acc = b[co];
                for ci in 0..x.c {
                    for ki in 0..k {
                        for kj in 0..k {
                            let r = (i * stride + ki) as isize - pad as isize;
                            let c = (j * stride + kj) as isize - pad as isize;
                            if r < 0 || c < 0 || r >= x.h as isize || c >= x.w as isize {
                                continue;
                            }
                            let xv = x.v[(ci * x.h + r as usize) * x.w + c as usize];
                            acc += xv * wt[((co * x.c + ci) * k + ki) * k + kj];
                        }
                    }
                }
                v[(co * ho + i) * wo + j] = acc;
            }
        }
    }
    Map { c: cout, h: ho, w: wo, v }
}

pub fn conv_t(x: &Map, wt: &[f64], b: &[f64], cout: usize, k: usize, stride: usize, pad: usize) -> Map {
    let ho = (x.h - 1) * stride + k - 2 * pad;
    let wo = (x.w - 1) * stride + k - 2 * pad;
    let mut v = vec![0.0; cout * ho * wo];
    for ci in 0..x.c {
        for i in 0..x.h {
            for j in 0..x.w {
                for co in 0..cout {
                    for ki in 0..k {
                        for kj in 0..k {
                            let r = (i * stride + ki) as isize - pad as isize;
                            let c = (j * stride + kj) as isize - pad as isize;
                            if r < 0 || c < 0 || r >= ho as isize || c >= wo as isize {
                                continue;
                            }
                            v[(co * ho + r as usize) * wo + c as usize] +=
                                x.v[(ci * x.h + i) * x.w + j] * wt[((ci * cout + co) * k + ki) * k + kj];
                        }
                    }
                }
            }
        }
    }
    for co in 0..cout {
        for t in 0..ho * wo {
            v[co * ho * wo + t] += b[co];
        }
    }
    Map { c: cout, h: ho, w: wo, v }
}

pub fn lrelu(m: Map, s: f64) -> Map {
    Map { v: m.v.into_iter().map(|x| if x > 0.0 { x } else { s * x }).collect(), ..m }
}

pub fn concat(a: Map, b: &Map) -> Map {
    let mut v = a.v;
    v.extend_from_slice(&b.v);
    Map { c: a.c + b.c, h: a.h, w: a.w, v }
}

pub fn img(t: &ImageTensor) -> Map {
    Map { c: t.channels(), h: t.height(), w: t.width(), v: t.values().to_vec() }
}

pub fn channels(a: &GeneratorArch, level: usize) -> usize {
    a.base_channels << level.min(3)
}

/// U-Net forward written out by hand. Dropout masks are drawn element by
/// element from `noise`, innermost decoder block first.
pub fn oracle_g(g: &GeneratorModel, x: &ImageTensor, noise: &mut RngState) -> Vec<f64> {
    let a = &g.arch;
    let p = &g.params;
    let mut skips = Vec::new();
    let mut h = img(x);
    for level in 0..a.depth {
        if level > 0 {
            h = lrelu(h, 0.2);
        }
        let n = format!("enc{level}");
        h = conv(&h, weight(p, &format!("{n}.weight")), weight(p, &format!("{n}.bias")), channels(a, level), 4, 2, 1);
        skips.push(Map { c: h.c, h: h.h, w: h.w, v: h.v.clone() });
    }
    for level in (0..a.depth).rev() {
        h = lrelu(h, 0.0);
        let cout = if level == 0 { a.out_channels } else { channels(a, level - 1) };
        let n = format!("dec{level}");
        h = conv_t(&h, weight(p, &format!("{n}.weight")), weight(p, &format!("{n}.bias")), cout, 4, 2, 1);
        if level == 0 {
            break;
        }
        let innermost_two = level + 2 >= a.depth;
        if a.dropout > 0.0 && innermost_two {
            let keep = 1.0 / (1.0 - a.dropout);
            for v in h.v.iter_mut() {
                *v *= if noise.uniform() < a.dropout { 0.0 } else { keep };
            }
        }
        h = concat(h, &skips[level - 1]);
    }
    h.v.into_iter().map(f64::tanh).collect()
}

pub fn oracle_d(d: &DiscriminatorModel, candidate: &[f64], x: &ImageTensor) -> f64 {
    let a = &d.arch;
    let p = &d.params;
    let mut h = concat(Map { c: x.channels(), h: x.height(), w: x.width(), v: candidate.to_vec() }, &img(x));
    let widths = [a.base_channels, 2 * a.base_channels, 4 * a.base_channels];
    for (l, &cout) in widths.iter().enumerate() {
        h = conv(&h, weight(p, &format!("conv{l}.weight")), weight(p, &format!("conv{l}.bias")), cout, 4, 2, 1);
        h = lrelu(h, 0.2);
    }
    let logit = conv(&h, weight(p, "conv3.weight"), weight(p, "conv3.bias"), 1, a.image_size / 8, 1, 0).v[0];
    (1.0 / (1.0 + (-logit).exp())).clamp(1e-7, 1.0 - 1e-7)
}

pub fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q).abs()).sum::<f64>() / a.len() as f64
}

pub fn instance(k: u64) -> (CganArch, GeneratorModel, GeneratorModel, DiscriminatorModel) {
    let size = if k.is_multiple_of(3) { 16 } else { 8 };
    let depth = 2 + (k % 2) as usize + usize::from(size == 16);
    let arch = CganArch {
        generator: GeneratorArch {
            image_size: size,
            depth,
            base_channels: 2 + (k % 2) as usize,
            dropout: [0.5, 0.0, 0.3][(k % 3) as usize],
            ..GeneratorArch::default()
        },
        discriminator: DiscriminatorArch { image_size: size, base_channels: 2, ..DiscriminatorArch::default() },
    };
    let g = init_generator(&arch.generator, k).unwrap();
    let t = init_generator(&arch.generator, 1000 + k).unwrap();
    let d = init_discriminator(&arch.discriminator, 2000 + k).unwrap();
    (arch, g, t, d)
}


pub fn loss_for(
    g: &GeneratorModel,
    d: &DiscriminatorModel,
    x: &ImageTensor,
    y: &ImageTensor,
    noise: &RngState,
    train_g: bool,
) -> (f64, Vec<f64>) {
    let mut tape = Tape::new();
    let gv = g.params.bind(&mut tape, train_g).unwrap();
    let dv = d.params.bind(&mut tape, !train_g).unwrap();
    let xv = tape.image(x);
    let yv = tape.image(y);
    let fake = g.forward_on(&mut tape, &gv, xv, &mut noise.clone()).unwrap();
    let loss = if train_g {
        generator_objective(&mut tape, d, &dv, fake, yv, xv, 100.0, GeneratorObjective::NonSaturating).unwrap()
    } else {
        discriminator_objective(&mut tape, d, &dv, yv, fake, xv).unwrap()
    };
    let value = tape.scalar(loss);
    tape.backward(loss).unwrap();
    let grads = if train_g { g.params.collect_grads(&tape, &gv) } else { d.params.collect_grads(&tape, &dv) };
    (value, grads)
}

/// Absolute differences between the library losses and the straight-line
/// versions on instance `k`: `[d_loss, g_loss, student_d_loss, student_g_loss]`.
pub fn loss_errors(k: u64, lambda: f64) -> [f64; 4] {
    let (arch, g, t, d) = instance(k);
    let size = arch.generator.image_size;
    let s = &generate_synthetic_task(k, 1, size, size).unwrap()[0];
    let (x, y) = (s.x(), s.y().unwrap());
    let noise = RngState::new(7 * k + 1);
    let fake = oracle_g(&g, x, &mut noise.clone());
    let teacher = oracle_g(&t, x, &mut noise.clone());
    let d_fake = oracle_d(&d, &fake, x);

    let got = d_loss(&d, &g, x, y, &mut noise.clone()).unwrap();
    let want = -(oracle_d(&d, y.values(), x).ln() + (1.0 - d_fake).ln());
    let e_d = (got - want).abs();

    let got = g_loss(&d, &g, x, y, lambda, &mut noise.clone()).unwrap();
    let want = -d_fake.ln() + lambda * l1(&fake, y.values());
    let e_g = (got - want).abs();

    let got = student_d_loss(&d, &g, &t, x, &mut noise.clone()).unwrap();
    let want = -(oracle_d(&d, &teacher, x).ln() + (1.0 - d_fake).ln());
    let e_sd = (got - want).abs();

    let got = student_g_loss(&d, &g, &t, x, lambda, &mut noise.clone()).unwrap();
    let want = -d_fake.ln() + lambda * l1(&fake, &teacher);
    let e_sg = (got - want).abs();
    [e_d, e_g, e_sd, e_sg]
}

/// `(finite difference, autodiff)` pairs for `n` random coordinates of the
/// generator (`train_g`) or discriminator loss on instance `k`.
pub fn fd_pairs(k: u64, train_g: bool, n: usize, eps: f64) -> Vec<(f64, f64)> {
    let (arch, g, _, d) = instance(k);
    let size = arch.generator.image_size;
    let s = &generate_synthetic_task(k, 1, size, size).unwrap()[0];
    let y = s.y().unwrap();
    let noise = RngState::new(k + 40);
    let (_, grads) = loss_for(&g, &d, s.x(), y, &noise, train_g);
    let base = if train_g { g.params.flatten() } else { d.params.flatten() };
    let mut pick = RngState::new(k).split(train_g as u64);
    (0..n)
        .map(|_| {
            let i = pick.range(0, base.len());
            let eval = |delta: f64| {
                let mut flat = base.clone();
                flat[i] += delta;
                let (mut g2, mut d2) = (g.clone(), d.clone());
                if train_g {
                    g2.params.assign_flat(&flat).unwrap();
                } else {
                    d2.params.assign_flat(&flat).unwrap();
                }
                loss_for(&g2, &d2, s.x(), y, &noise, train_g).0
            };
            ((eval(eps) - eval(-eps)) / (2.0 * eps), grads[i])
        })
        .collect()
}
