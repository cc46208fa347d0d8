//! Minimal convolutional building blocks with explicit backward passes.
//!
//! Every network in the crate stores its weights in one flat parameter
//! vector; layers only hold offsets into it. That keeps optimisers,
//! checkpoints and finite-difference checks trivial.

use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::grid::Grid;

mod encoder;
pub use encoder::{ConvEncoder, EncoderCache, EncoderConfig};
use crate::num::Real;

/// Hands out contiguous parameter ranges.
#[derive(Clone, Debug, Default)]
pub struct ParamLayout {
    len: usize,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn block(&mut self, n: usize) -> Range<usize> {
        let r = self.len..self.len + n;
        self.len += n;
        r
    }

    pub fn conv(&mut self, cin: usize, cout: usize) -> Conv3x3 {
        let weight = self.block(cout * cin * 9).start;
        let bias = self.block(cout).start;
        Conv3x3 {
            cin,
            cout,
            weight,
            bias,
        }
    }

    pub fn linear(&mut self, inputs: usize, outputs: usize) -> Linear {
        let weight = self.block(outputs * inputs).start;
        let bias = self.block(outputs).start;
        Linear {
            inputs,
            outputs,
            weight,
            bias,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Valid output rows for a kernel offset `d` on an axis of length `n`.
#[inline]
fn valid(n: usize, d: isize) -> Range<usize> {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d).clamp(0, n as isize) as usize;
    lo..hi.max(lo)
}

/// 3x3 convolution, stride 1, zero padding 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3x3 {
    pub cin: usize,
    pub cout: usize,
    weight: usize,
    bias: usize,
}

impl Conv3x3 {
    #[inline]
    fn w_index(&self, co: usize, ci: usize, k: usize) -> usize {
        self.weight + (co * self.cin + ci) * 9 + k
    }

    pub fn init<F: Real>(&self, params: &mut [F], rng: &mut impl Rng, gain: f64) {
        let std = gain * (2.0 / (self.cin * 9) as f64).sqrt();
        for i in 0..self.cout * self.cin * 9 {
            let n: f64 = StandardNormal.sample(rng);
            params[self.weight + i] = F::of(std * n);
        }
        for i in 0..self.cout {
            params[self.bias + i] = F::zero();
        }
    }

    /// Remove each kernel's mean so the filter ignores flat regions.
    pub fn center_kernels<F: Real>(&self, params: &mut [F]) {
        for co in 0..self.cout {
            for ci in 0..self.cin {
                let k = &mut params[self.w_index(co, ci, 0)..self.w_index(co, ci, 0) + 9];
                let mean = k.iter().copied().sum::<F>() / F::of(9.0);
                k.iter_mut().for_each(|v| *v -= mean);
            }
        }
    }

    pub fn forward<F: Real>(&self, params: &[F], x: &Grid<F>) -> Grid<F> {
        let (c, h, w) = x.shape();
        assert_eq!(c, self.cin, "conv input channels");
        let mut out = Grid::zeros(self.cout, h, w);
        for co in 0..self.cout {
            let b = params[self.bias + co];
            let dst = out.channel_mut(co);
            dst.iter_mut().for_each(|v| *v = b);
            for ci in 0..self.cin {
                let src = x.channel(ci);
                for k in 0..9 {
                    let wv = params[self.w_index(co, ci, k)];
                    let (dy, dx) = ((k / 3) as isize - 1, (k % 3) as isize - 1);
                    let xs = valid(w, dx);
                    for y in valid(h, dy) {
                        let sy = (y as isize + dy) as usize;
                        let drow = &mut dst[y * w + xs.start..y * w + xs.end];
                        let s0 = (sy * w) as isize + xs.start as isize + dx;
                        let srow = &src[s0 as usize..s0 as usize + xs.len()];
                        for (d, &s) in drow.iter_mut().zip(srow) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
        out
    }

    /// Gradient with respect to the input.
    pub fn backward_input<F: Real>(&self, params: &[F], grad_out: &Grid<F>) -> Grid<F> {
        let (c, h, w) = grad_out.shape();
        assert_eq!(c, self.cout, "conv grad channels");
        let mut gin = Grid::zeros(self.cin, h, w);
        for ci in 0..self.cin {
            let dst = gin.channel_mut(ci);
            for co in 0..self.cout {
                let g = grad_out.channel(co);
                for k in 0..9 {
                    let wv = params[self.w_index(co, ci, k)];
                    let (dy, dx) = ((k / 3) as isize - 1, (k % 3) as isize - 1);
                    let xs = valid(w, dx);
                    for y in valid(h, dy) {
                        let sy = (y as isize + dy) as usize;
                        let grow = &g[y * w + xs.start..y * w + xs.end];
                        let s0 = ((sy * w) as isize + xs.start as isize + dx) as usize;
                        let drow = &mut dst[s0..s0 + xs.len()];
                        for (d, &gv) in drow.iter_mut().zip(grow) {
                            *d += wv * gv;
                        }
                    }
                }
            }
        }
        gin
    }

    /// Accumulate parameter gradients into `grads`.
    pub fn backward_params<F: Real>(&self, x: &Grid<F>, grad_out: &Grid<F>, grads: &mut [F]) {
        let (_, h, w) = x.shape();
        for co in 0..self.cout {
            let g = grad_out.channel(co);
            grads[self.bias + co] += g.iter().copied().sum();
            for ci in 0..self.cin {
                let src = x.channel(ci);
                for k in 0..9 {
                    let (dy, dx) = ((k / 3) as isize - 1, (k % 3) as isize - 1);
                    let xs = valid(w, dx);
                    let mut acc = F::zero();
                    for y in valid(h, dy) {
                        let sy = (y as isize + dy) as usize;
                        let grow = &g[y * w + xs.start..y * w + xs.end];
                        let s0 = ((sy * w) as isize + xs.start as isize + dx) as usize;
                        let srow = &src[s0..s0 + xs.len()];
                        for (&gv, &s) in grow.iter().zip(srow) {
                            acc += gv * s;
                        }
                    }
                    grads[self.w_index(co, ci, k)] += acc;
                }
            }
        }
    }
}

/// Dense layer `y = W x + b` with `W` stored row-major (`outputs x inputs`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub inputs: usize,
    pub outputs: usize,
    weight: usize,
    bias: usize,
}

impl Linear {
    pub fn init<F: Real>(&self, params: &mut [F], rng: &mut impl Rng, gain: f64) {
        let std = gain * (1.0 / self.inputs as f64).sqrt();
        for i in 0..self.outputs * self.inputs {
            let n: f64 = StandardNormal.sample(rng);
            params[self.weight + i] = F::of(std * n);
        }
        for i in 0..self.outputs {
            params[self.bias + i] = F::zero();
        }
    }

    pub fn forward<F: Real>(&self, params: &[F], x: &[F]) -> Vec<F> {
        assert_eq!(x.len(), self.inputs);
        (0..self.outputs)
            .map(|o| {
                let row = &params[self.weight + o * self.inputs..self.weight + (o + 1) * self.inputs];
                params[self.bias + o] + row.iter().zip(x).map(|(&a, &b)| a * b).sum::<F>()
            })
            .collect()
    }

    pub fn backward_input<F: Real>(&self, params: &[F], grad_out: &[F]) -> Vec<F> {
        let mut gin = vec![F::zero(); self.inputs];
        for (o, &g) in grad_out.iter().enumerate() {
            let row = &params[self.weight + o * self.inputs..self.weight + (o + 1) * self.inputs];
            for (gi, &w) in gin.iter_mut().zip(row) {
                *gi += w * g;
            }
        }
        gin
    }

    pub fn backward_params<F: Real>(&self, x: &[F], grad_out: &[F], grads: &mut [F]) {
        for (o, &g) in grad_out.iter().enumerate() {
            grads[self.bias + o] += g;
            let row = &mut grads[self.weight + o * self.inputs..self.weight + (o + 1) * self.inputs];
            for (gw, &xi) in row.iter_mut().zip(x) {
                *gw += g * xi;
            }
        }
    }
}

#[inline]
fn sigmoid<F: Real>(z: F) -> F {
    F::one() / (F::one() + (-z).exp())
}

pub fn silu<F: Real>(pre: &Grid<F>) -> Grid<F> {
    pre.map(|z| z * sigmoid(z))
}

/// Gradient through SiLU given the pre-activation.
pub fn silu_backward<F: Real>(pre: &Grid<F>, grad: &Grid<F>) -> Grid<F> {
    let mut out = grad.clone();
    for (g, &z) in out.as_mut_slice().iter_mut().zip(pre.as_slice()) {
        let s = sigmoid(z);
        *g *= s * (F::one() + z * (F::one() - s));
    }
    out
}

pub fn silu_vec<F: Real>(pre: &[F]) -> Vec<F> {
    pre.iter().map(|&z| z * sigmoid(z)).collect()
}

pub fn silu_vec_backward<F: Real>(pre: &[F], grad: &[F]) -> Vec<F> {
    pre.iter()
        .zip(grad)
        .map(|(&z, &g)| {
            let s = sigmoid(z);
            g * s * (F::one() + z * (F::one() - s))
        })
        .collect()
}

/// 2x2 average pooling; height and width must be even.
pub fn avg_pool2<F: Real>(x: &Grid<F>) -> Grid<F> {
    let (c, h, w) = x.shape();
    assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even sizes, got {h}x{w}");
    let quarter = F::of(0.25);
    Grid::from_fn(c, h / 2, w / 2, |ch, y, xx| {
        quarter
            * (x.get(ch, 2 * y, 2 * xx)
                + x.get(ch, 2 * y, 2 * xx + 1)
                + x.get(ch, 2 * y + 1, 2 * xx)
                + x.get(ch, 2 * y + 1, 2 * xx + 1))
    })
}

pub fn avg_pool2_backward<F: Real>(grad: &Grid<F>) -> Grid<F> {
    let (c, h, w) = grad.shape();
    let quarter = F::of(0.25);
    Grid::from_fn(c, 2 * h, 2 * w, |ch, y, x| quarter * grad.get(ch, y / 2, x / 2))
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2<F: Real>(x: &Grid<F>) -> Grid<F> {
    let (c, h, w) = x.shape();
    Grid::from_fn(c, 2 * h, 2 * w, |ch, y, xx| x.get(ch, y / 2, xx / 2))
}

pub fn upsample2_backward<F: Real>(grad: &Grid<F>) -> Grid<F> {
    let (c, h, w) = grad.shape();
    Grid::from_fn(c, h / 2, w / 2, |ch, y, x| {
        grad.get(ch, 2 * y, 2 * x)
            + grad.get(ch, 2 * y, 2 * x + 1)
            + grad.get(ch, 2 * y + 1, 2 * x)
            + grad.get(ch, 2 * y + 1, 2 * x + 1)
    })
}

/// Mean over the spatial axes, one value per channel.
pub fn global_avg_pool<F: Real>(x: &Grid<F>) -> Vec<F> {
    (0..x.channels())
        .map(|c| {
            let p = x.channel(c);
            p.iter().copied().sum::<F>() / F::of(p.len() as f64)
        })
        .collect()
}

pub fn global_avg_pool_backward<F: Real>(grad: &[F], h: usize, w: usize) -> Grid<F> {
    let k = F::of(1.0 / (h * w) as f64);
    Grid::from_fn(grad.len(), h, w, |c, _, _| grad[c] * k)
}

const STD_FLOOR: f64 = 1e-2;

/// Per-channel spatial mean followed by the per-channel log standard
/// deviation (floored): `2 * C` values. On the log scale a linear layer can
/// form contrast-invariant ratios between channels.
pub fn mean_std_pool<F: Real>(x: &Grid<F>) -> Vec<F> {
    let means = global_avg_pool(x);
    let stds = (0..x.channels()).map(|c| {
        let p = x.channel(c);
        let var = p.iter().map(|&v| (v - means[c]) * (v - means[c])).sum::<F>() / F::of(p.len() as f64);
        (var + F::of(STD_FLOOR * STD_FLOOR)).ln() * F::of(0.5)
    });
    let mut out = means.clone();
    out.extend(stds);
    out
}

/// Backward of [`mean_std_pool`] given its input and output.
pub fn mean_std_pool_backward<F: Real>(x: &Grid<F>, pooled: &[F], grad: &[F]) -> Grid<F> {
    let (c, h, w) = x.shape();
    let n = F::of((h * w) as f64);
    let mut out = Grid::zeros(c, h, w);
    for ch in 0..c {
        // d log(s) = (x - m) dx / (n s^2)
        let (m, s2) = (pooled[ch], (pooled[c + ch] * F::of(2.0)).exp());
        let (gm, gs) = (grad[ch] / n, grad[c + ch] / (n * s2));
        for (o, &v) in out.channel_mut(ch).iter_mut().zip(x.channel(ch)) {
            *o = gm + gs * (v - m);
        }
    }
    out
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamW {
    pub fn new(len: usize, weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn update<F: Real>(&mut self, params: &mut [F], grads: &[F], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i].f64();
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            let p = params[i].f64();
            let p = p - lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * p);
            params[i] = F::of(p);
        }
    }
}

/// Cosine annealing from `lr` at step 0 to `lr * floor` at `total`.
pub fn cosine_lr(lr: f64, step: usize, total: usize, floor: f64) -> f64 {
    if total == 0 {
        return lr;
    }
    let t = (step as f64 / total as f64).min(1.0);
    lr * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
}
