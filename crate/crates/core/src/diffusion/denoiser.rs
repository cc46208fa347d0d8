use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{ensure, Result};
use crate::grid::Grid;
use crate::nn::{
    avg_pool2, avg_pool2_backward, silu, silu_backward, upsample2, upsample2_backward, Conv3x3,
    Linear, ParamLayout,
};
use crate::num::Real;

/// Anything that predicts the noise component of `x_t` at step `t` and can
/// pull a gradient back through that prediction.
pub trait NoisePredictor<F: Real>: Sync {
    fn predict(&self, x: &Grid<F>, t: usize) -> Grid<F>;

    /// Vector-Jacobian product `J_x(predict)(x, t)^T grad`.
    fn vjp(&self, x: &Grid<F>, t: usize, grad: &Grid<F>) -> Grid<F>;
}

/// The predictor that always answers zero.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroPredictor;

impl<F: Real> NoisePredictor<F> for ZeroPredictor {
    fn predict(&self, x: &Grid<F>, _t: usize) -> Grid<F> {
        Grid::zeros_like(x)
    }

    fn vjp(&self, x: &Grid<F>, _t: usize, _grad: &Grid<F>) -> Grid<F> {
        Grid::zeros_like(x)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub channels: usize,
    pub hidden: usize,
    pub time_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            channels: 1,
            hidden: 8,
            time_dim: 16,
        }
    }
}

#[derive(Clone, Debug)]
struct Layers {
    time: Linear,
    c1: Conv3x3,
    c2: Conv3x3,
    c3: Conv3x3,
    c4: Conv3x3,
    c5: Conv3x3,
}

impl Layers {
    fn new(cfg: &DenoiserConfig) -> (Self, usize) {
        let h = cfg.hidden;
        let mut layout = ParamLayout::new();
        let layers = Self {
            time: layout.linear(cfg.time_dim, h),
            c1: layout.conv(cfg.channels, h),
            c2: layout.conv(h, 2 * h),
            c3: layout.conv(2 * h, 2 * h),
            c4: layout.conv(3 * h, h),
            c5: layout.conv(h, cfg.channels),
        };
        (layers, layout.len())
    }
}

/// Small encoder-decoder noise predictor: one pooled stage, a skip
/// connection at full resolution and a sinusoidal timestep embedding added
/// as a per-channel bias after the first convolution.
#[derive(Clone, Debug)]
pub struct Denoiser<F = f64> {
    config: DenoiserConfig,
    layers: Layers,
    params: Vec<F>,
}

/// Intermediate activations of one evaluation.
#[derive(Clone, Debug)]
pub struct DenoiserCache<F> {
    x: Grid<F>,
    embedding: Vec<F>,
    pre1: Grid<F>,
    pooled: Grid<F>,
    pre2: Grid<F>,
    h2: Grid<F>,
    pre3: Grid<F>,
    cat: Grid<F>,
    pre4: Grid<F>,
    h4: Grid<F>,
}

fn timestep_embedding<F: Real>(t: usize, dim: usize) -> Vec<F> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half.max(1) as f64).exp();
        out.push(F::of((t as f64 * freq).sin()));
    }
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half.max(1) as f64).exp();
        out.push(F::of((t as f64 * freq).cos()));
    }
    out.resize(dim, F::zero());
    out
}

impl<F: Real> Denoiser<F> {
    /// Randomly initialised network.
    pub fn new(config: DenoiserConfig, seed: u64) -> Self {
        let (layers, len) = Layers::new(&config);
        let mut params = vec![F::zero(); len];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        layers.time.init(&mut params, &mut rng, 1.0);
        layers.c1.init(&mut params, &mut rng, 1.0);
        layers.c2.init(&mut params, &mut rng, 1.0);
        layers.c3.init(&mut params, &mut rng, 1.0);
        layers.c4.init(&mut params, &mut rng, 1.0);
        layers.c5.init(&mut params, &mut rng, 0.5);
        Self {
            config,
            layers,
            params,
        }
    }

    pub fn from_params(config: DenoiserConfig, params: Vec<F>) -> Result<Self> {
        let (layers, len) = Layers::new(&config);
        ensure!(
            params.len() == len,
            Format,
            "denoiser expects {len} parameters, got {}",
            params.len()
        );
        Ok(Self {
            config,
            layers,
            params,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &[F] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [F] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn cast<G: Real>(&self) -> Denoiser<G> {
        Denoiser {
            config: self.config,
            layers: self.layers.clone(),
            params: self.params.iter().map(|&v| G::of(v.f64())).collect(),
        }
    }

    fn check_input(&self, x: &Grid<F>) {
        let (c, h, w) = x.shape();
        assert_eq!(c, self.config.channels, "denoiser channel count");
        assert!(h % 2 == 0 && w % 2 == 0, "denoiser needs even sides, got {h}x{w}");
    }

    pub fn forward_cached(&self, x: &Grid<F>, t: usize) -> (Grid<F>, DenoiserCache<F>) {
        self.check_input(x);
        let p = &self.params;
        let l = &self.layers;
        let embedding = timestep_embedding::<F>(t, self.config.time_dim);
        let bias = l.time.forward(p, &embedding);
        let mut pre1 = l.c1.forward(p, x);
        for (c, &b) in bias.iter().enumerate() {
            pre1.channel_mut(c).iter_mut().for_each(|v| *v += b);
        }
        let h1 = silu(&pre1);
        let pooled = avg_pool2(&h1);
        let pre2 = l.c2.forward(p, &pooled);
        let h2 = silu(&pre2);
        let pre3 = l.c3.forward(p, &h2);
        let up = upsample2(&silu(&pre3));
        let cat = Grid::concat_channels(&[&up, &h1]);
        let pre4 = l.c4.forward(p, &cat);
        let h4 = silu(&pre4);
        let out = l.c5.forward(p, &h4);
        let cache = DenoiserCache {
            x: x.clone(),
            embedding,
            pre1,
            pooled,
            pre2,
            h2,
            pre3,
            cat,
            pre4,
            h4,
        };
        (out, cache)
    }

    /// Backward pass for one evaluation. Parameter gradients are added to
    /// `param_grads` when it is given. Returns the input gradient.
    pub fn backward(
        &self,
        cache: &DenoiserCache<F>,
        grad_out: &Grid<F>,
        mut param_grads: Option<&mut [F]>,
    ) -> Grid<F> {
        let p = &self.params;
        let l = &self.layers;
        let h = self.config.hidden;
        if let Some(g) = param_grads.as_deref_mut() {
            l.c5.backward_params(&cache.h4, grad_out, g);
        }
        let g_pre4 = silu_backward(&cache.pre4, &l.c5.backward_input(p, grad_out));
        if let Some(g) = param_grads.as_deref_mut() {
            l.c4.backward_params(&cache.cat, &g_pre4, g);
        }
        let (g_up, g_skip) = l.c4.backward_input(p, &g_pre4).split_channels(2 * h);
        let g_pre3 = silu_backward(&cache.pre3, &upsample2_backward(&g_up));
        if let Some(g) = param_grads.as_deref_mut() {
            l.c3.backward_params(&cache.h2, &g_pre3, g);
        }
        let g_pre2 = silu_backward(&cache.pre2, &l.c3.backward_input(p, &g_pre3));
        if let Some(g) = param_grads.as_deref_mut() {
            l.c2.backward_params(&cache.pooled, &g_pre2, g);
        }
        let g_h1 = g_skip.add(&avg_pool2_backward(&l.c2.backward_input(p, &g_pre2)));
        let g_pre1 = silu_backward(&cache.pre1, &g_h1);
        if let Some(g) = param_grads.as_deref_mut() {
            l.c1.backward_params(&cache.x, &g_pre1, g);
            let g_bias: Vec<F> = (0..h).map(|c| g_pre1.channel(c).iter().copied().sum()).collect();
            l.time.backward_params(&cache.embedding, &g_bias, g);
        }
        l.c1.backward_input(p, &g_pre1)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(
            Self::KIND,
            serde_json::to_value(self.config).expect("config serialises"),
            self.params.iter().map(|v| v.f64()).collect(),
        )
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config: DenoiserConfig = ckpt.config_as(Self::KIND)?;
        Self::from_params(config, ckpt.params.iter().map(|&v| F::of(v)).collect())
    }

    pub const KIND: &'static str = "denoiser";
}

impl<F: Real> NoisePredictor<F> for Denoiser<F> {
    fn predict(&self, x: &Grid<F>, t: usize) -> Grid<F> {
        self.forward_cached(x, t).0
    }

    fn vjp(&self, x: &Grid<F>, t: usize, grad: &Grid<F>) -> Grid<F> {
        let (_, cache) = self.forward_cached(x, t);
        self.backward(&cache, grad, None)
    }
}
