use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    avg_pool2, avg_pool2_backward, mean_std_pool, mean_std_pool_backward, silu, silu_backward,
    Conv3x3, Linear, ParamLayout,
};
use crate::grid::Grid;
use crate::num::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub channels: usize,
    pub width: usize,
    pub embed_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            channels: 1,
            width: 8,
            embed_dim: 16,
        }
    }
}

/// Three conv stages with two poolings. The per-channel spatial mean and
/// standard deviation of every stage's activations are concatenated and
/// linearly projected, so fine-scale statistics (noise, edge sharpness) reach
/// the output directly. Inputs must have sides divisible by four.
#[derive(Clone, Debug)]
pub struct ConvEncoder {
    pub config: EncoderConfig,
    c1: Conv3x3,
    c2: Conv3x3,
    c3: Conv3x3,
    proj: Linear,
    offset: usize,
    len: usize,
}

/// Activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct EncoderCache<F> {
    x: Grid<F>,
    pre: [Grid<F>; 3],
    act: [Grid<F>; 3],
    p1: Grid<F>,
    p2: Grid<F>,
    pooled: Vec<F>,
}

impl ConvEncoder {
    /// Allocate the encoder's parameters from `layout`.
    pub fn new(config: EncoderConfig, layout: &mut ParamLayout) -> Self {
        let offset = layout.len();
        let w = config.width;
        let c1 = layout.conv(config.channels, w);
        let c2 = layout.conv(w, 2 * w);
        let c3 = layout.conv(2 * w, 2 * w);
        let proj = layout.linear(10 * w, config.embed_dim);
        let len = layout.len() - offset;
        Self {
            config,
            c1,
            c2,
            c3,
            proj,
            offset,
            len,
        }
    }

    pub fn param_range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }

    /// Features before the projection have this many entries.
    pub fn feature_dim(&self) -> usize {
        10 * self.config.width
    }

    pub fn init<F: Real>(&self, params: &mut [F], rng: &mut impl Rng) {
        // first-stage filters start as pure detail (zero-sum) detectors
        self.c1.init(params, rng, 1.0);
        self.c1.center_kernels(params);
        self.c2.init(params, rng, 1.0);
        self.c3.init(params, rng, 1.0);
        self.proj.init(params, rng, 1.0);
    }

    pub fn forward<F: Real>(&self, params: &[F], x: &Grid<F>) -> (Vec<F>, EncoderCache<F>) {
        let pre1 = self.c1.forward(params, x);
        let a1 = silu(&pre1);
        let p1 = avg_pool2(&a1);
        let pre2 = self.c2.forward(params, &p1);
        let a2 = silu(&pre2);
        let p2 = avg_pool2(&a2);
        let pre3 = self.c3.forward(params, &p2);
        let a3 = silu(&pre3);
        let mut pooled = mean_std_pool(&a1);
        pooled.extend(mean_std_pool(&a2));
        pooled.extend(mean_std_pool(&a3));
        let out = self.proj.forward(params, &pooled);
        (
            out,
            EncoderCache {
                x: x.clone(),
                pre: [pre1, pre2, pre3],
                act: [a1, a2, a3],
                p1,
                p2,
                pooled,
            },
        )
    }

    /// Pooled features ahead of the final projection.
    pub fn features<F: Real>(&self, params: &[F], x: &Grid<F>) -> Vec<F> {
        self.forward(params, x).1.pooled
    }

    /// Backpropagate `grad_out` (gradient wrt the embedding). Parameter
    /// gradients are accumulated into `param_grads` when given; the input
    /// gradient is returned when `want_input` is set.
    pub fn backward<F: Real>(
        &self,
        params: &[F],
        cache: &EncoderCache<F>,
        grad_out: &[F],
        mut param_grads: Option<&mut [F]>,
        want_input: bool,
    ) -> Option<Grid<F>> {
        if let Some(g) = param_grads.as_deref_mut() {
            self.proj.backward_params(&cache.pooled, grad_out, g);
        }
        let g_pooled = self.proj.backward_input(params, grad_out);
        let w = self.config.width;
        let bounds = [0, 2 * w, 6 * w, 10 * w];
        let stat_grad = |k: usize| {
            let r = bounds[k]..bounds[k + 1];
            mean_std_pool_backward(&cache.act[k], &cache.pooled[r.clone()], &g_pooled[r])
        };

        let g3 = silu_backward(&cache.pre[2], &stat_grad(2));
        if let Some(g) = param_grads.as_deref_mut() {
            self.c3.backward_params(&cache.p2, &g3, g);
        }
        let mut g_a2 = avg_pool2_backward(&self.c3.backward_input(params, &g3));
        g_a2.axpy(F::one(), &stat_grad(1));
        let g2 = silu_backward(&cache.pre[1], &g_a2);
        if let Some(g) = param_grads.as_deref_mut() {
            self.c2.backward_params(&cache.p1, &g2, g);
        }
        let mut g_a1 = avg_pool2_backward(&self.c2.backward_input(params, &g2));
        g_a1.axpy(F::one(), &stat_grad(0));
        let g1 = silu_backward(&cache.pre[0], &g_a1);
        if let Some(g) = param_grads.as_deref_mut() {
            self.c1.backward_params(&cache.x, &g1, g);
        }
        want_input.then(|| self.c1.backward_input(params, &g1))
    }
}
