//! A small multi-scale, text-anchor-free analogue of language-image quality
//! estimation: crops from a three-level pyramid are embedded, compared by
//! cosine similarity against one learned anchor per quality level, and the
//! softmax over levels gives an expected quality on a 1..=5 scale.

use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{ensure, Result};
use crate::grid::ImageGrid;
use crate::nn::{cosine_lr, AdamW, ConvEncoder, EncoderCache, EncoderConfig, ParamLayout};
use crate::num::{norm_cdf, norm_pdf};
use crate::synth::{distorted_set, rng, toy_dataset, Distortion};

use super::pyramid::{PyramidConfig, PyramidOp};
use super::scorer::{check_input, crop_input, crop_input_backward, QualityScorer};

/// Number of discrete quality levels `v = 1..=V`.
pub const QUALITY_LEVELS: usize = 5;

const NORM_FLOOR: f64 = 1e-12;


/// Mean cosine similarity between crop embeddings and one anchor row.
pub fn multiscale_logit(embeddings: &[Vec<f64>], anchor: &[f64]) -> Result<f64> {
    ensure!(!embeddings.is_empty(), Config, "at least one crop is required");
    Ok(embeddings.iter().map(|f| cosine(f, anchor)).sum::<f64>() / embeddings.len() as f64)
}

/// Softmax of `logits / tau`.
pub fn level_probs(logits: &[f64], tau: f64) -> Result<Vec<f64>> {
    ensure!(tau > 0.0 && tau.is_finite(), Config, "temperature must be positive, got {tau}");
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| ((l - m) / tau).exp()).collect();
    let total: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / total).collect())
}

/// `sum_v p_v * v` with levels numbered from one.
pub fn expected_quality(probs: &[f64]) -> f64 {
    probs.iter().enumerate().map(|(i, p)| p * (i + 1) as f64).sum()
}

/// One when `x` is rated at least as good as `y`.
pub fn pairwise_label(qx: f64, qy: f64) -> f64 {
    if qx >= qy {
        1.0
    } else {
        0.0
    }
}

/// Thurstone-style preference probability from two predicted qualities.
pub fn pairwise_prob(qx: f64, qy: f64) -> f64 {
    norm_cdf((qx - qy) / std::f64::consts::SQRT_2)
}

/// `1 - sqrt(p * p_hat) - sqrt((1 - p) * (1 - p_hat))`
pub fn fidelity_loss(p: f64, p_hat: f64) -> Result<f64> {
    ensure!((0.0..=1.0).contains(&p), Contract, "label probability {p} outside [0, 1]");
    ensure!((0.0..=1.0).contains(&p_hat), Contract, "predicted probability {p_hat} outside [0, 1]");
    Ok(1.0 - (p * p_hat).sqrt() - ((1.0 - p) * (1.0 - p_hat)).sqrt())
}

/// Derivative of the fidelity loss with respect to `p_hat`, evaluated with
/// `p_hat` kept a hair away from the endpoints.
pub fn fidelity_loss_grad(p: f64, p_hat: f64) -> f64 {
    let q = p_hat.clamp(1e-9, 1.0 - 1e-9);
    -0.5 * (p / q).sqrt() + 0.5 * ((1.0 - p) / (1.0 - q)).sqrt()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt().max(NORM_FLOOR)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (norm(a) * norm(b))
}

/// Gradients of `cos(a, b)` with respect to `a` and `b`, scaled by `k`.
fn cosine_backward(a: &[f64], b: &[f64], k: f64, ga: &mut [f64], gb: &mut [f64]) {
    let (na, nb) = (norm(a), norm(b));
    let c = cosine(a, b);
    for i in 0..a.len() {
        ga[i] += k * (b[i] / (na * nb) - c * a[i] / (na * na));
        gb[i] += k * (a[i] / (na * nb) - c * b[i] / (nb * nb));
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MsLiqeConfig {
    pub encoder: EncoderConfig,
    pub pyramid: PyramidConfig,
    pub init_temperature: f64,
}

impl Default for MsLiqeConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            pyramid: PyramidConfig::default(),
            init_temperature: 0.5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MsLiqeModel {
    config: MsLiqeConfig,
    encoder: ConvEncoder,
    anchors: Range<usize>,
    log_tau: usize,
    params: Vec<f64>,
}

/// Forward state for one image.
struct Trace {
    op: PyramidOp,
    embeddings: Vec<Vec<f64>>,
    caches: Vec<EncoderCache<f64>>,
    /// `(normalised crop, contrast scale)` per crop
    norms: Vec<(ImageGrid, f64)>,
    logits: Vec<f64>,
    probs: Vec<f64>,
}

impl MsLiqeModel {
    pub const KIND: &'static str = "msliqe";

    fn layout(config: &MsLiqeConfig) -> (ConvEncoder, Range<usize>, usize, usize) {
        let mut layout = ParamLayout::new();
        let stacked = EncoderConfig {
            channels: 2 * config.encoder.channels,
            ..config.encoder
        };
        let encoder = ConvEncoder::new(stacked, &mut layout);
        let anchors = layout.block(QUALITY_LEVELS * config.encoder.embed_dim);
        let log_tau = layout.block(1).start;
        (encoder, anchors, log_tau, layout.len())
    }

    pub fn new(config: MsLiqeConfig, seed: u64) -> Result<Self> {
        config.pyramid.validate()?;
        ensure!(
            config.init_temperature > 0.0,
            Config,
            "temperature must be positive"
        );
        let (encoder, anchors, log_tau, len) = Self::layout(&config);
        let mut params = vec![0.0; len];
        let mut r = rng(seed);
        encoder.init(&mut params, &mut r);
        for v in &mut params[anchors.clone()] {
            *v = StandardNormal.sample(&mut r);
        }
        params[log_tau] = config.init_temperature.ln();
        Ok(Self {
            config,
            encoder,
            anchors,
            log_tau,
            params,
        })
    }

    pub fn from_params(config: MsLiqeConfig, params: Vec<f64>) -> Result<Self> {
        config.pyramid.validate()?;
        let (encoder, anchors, log_tau, len) = Self::layout(&config);
        ensure!(
            params.len() == len,
            Format,
            "expected {len} parameters, found {}",
            params.len()
        );
        Ok(Self {
            config,
            encoder,
            anchors,
            log_tau,
            params,
        })
    }

    pub fn config(&self) -> &MsLiqeConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn temperature(&self) -> f64 {
        self.params[self.log_tau].exp()
    }

    fn anchor(&self, v: usize) -> &[f64] {
        let l = self.config.encoder.embed_dim;
        &self.params[self.anchors.start + v * l..self.anchors.start + (v + 1) * l]
    }

    fn trace(&self, x: &ImageGrid) -> Result<Trace> {
        check_input(x)?;
        ensure!(
            x.channels() == self.config.encoder.channels,
            Contract,
            "image has {} channels, model expects {}",
            x.channels(),
            self.config.encoder.channels
        );
        let op = PyramidOp::new(x.height(), x.width(), &self.config.pyramid)?;
        let mut norms = Vec::new();
        let (embeddings, caches): (Vec<_>, Vec<_>) = op
            .crops(x)
            .iter()
            .map(|c| {
                let (input, z, s) = crop_input(c);
                norms.push((z, s));
                self.encoder.forward(&self.params, &input)
            })
            .unzip();
        let logits = (0..QUALITY_LEVELS)
            .map(|v| multiscale_logit(&embeddings, self.anchor(v)))
            .collect::<Result<Vec<_>>>()?;
        let probs = level_probs(&logits, self.temperature())?;
        Ok(Trace {
            op,
            embeddings,
            caches,
            norms,
            logits,
            probs,
        })
    }

    /// Per-level logits for `x`.
    pub fn logits(&self, x: &ImageGrid) -> Result<Vec<f64>> {
        Ok(self.trace(x)?.logits)
    }

    pub fn predict(&self, x: &ImageGrid) -> Result<f64> {
        Ok(expected_quality(&self.trace(x)?.probs))
    }

    /// Predicted quality; backpropagates `grad_q` into `param_grads` and,
    /// when requested, into the image.
    fn predict_backward(
        &self,
        x: &ImageGrid,
        grad_q: f64,
        param_grads: Option<&mut [f64]>,
        want_input: bool,
    ) -> Result<(f64, Option<ImageGrid>)> {
        let tr = self.trace(x)?;
        let q = expected_quality(&tr.probs);
        let gx = self.backward(&tr, x.channels(), grad_q, param_grads, want_input);
        Ok((q, gx))
    }

    fn backward(
        &self,
        tr: &Trace,
        channels: usize,
        grad_q: f64,
        mut param_grads: Option<&mut [f64]>,
        want_input: bool,
    ) -> Option<ImageGrid> {
        let tau = self.temperature();
        let mean_g: f64 = tr
            .probs
            .iter()
            .enumerate()
            .map(|(i, p)| p * (i + 1) as f64 * grad_q)
            .sum();
        let g_z: Vec<f64> = tr
            .probs
            .iter()
            .enumerate()
            .map(|(i, p)| p * ((i + 1) as f64 * grad_q - mean_g))
            .collect();
        let g_logit: Vec<f64> = g_z.iter().map(|g| g / tau).collect();

        let l = self.config.encoder.embed_dim;
        let u = tr.embeddings.len() as f64;
        let mut g_emb = vec![vec![0.0; l]; tr.embeddings.len()];
        let mut g_anchor = vec![0.0; QUALITY_LEVELS * l];
        for (v, gl) in g_logit.iter().enumerate() {
            for (f, gf) in tr.embeddings.iter().zip(&mut g_emb) {
                cosine_backward(f, self.anchor(v), gl / u, gf, &mut g_anchor[v * l..(v + 1) * l]);
            }
        }
        if let Some(g) = param_grads.as_deref_mut() {
            for (acc, v) in g[self.anchors.clone()].iter_mut().zip(&g_anchor) {
                *acc += v;
            }
            g[self.log_tau] -= g_z
                .iter()
                .zip(&tr.logits)
                .map(|(gz, lg)| gz * lg / tau)
                .sum::<f64>();
        }
        let mut crop_grads = Vec::with_capacity(tr.caches.len());
        for ((cache, ge), (z, s)) in tr.caches.iter().zip(&g_emb).zip(&tr.norms) {
            let gi = self
                .encoder
                .backward(&self.params, cache, ge, param_grads.as_deref_mut(), want_input);
            if let Some(gi) = gi {
                crop_grads.push(crop_input_backward(z, *s, &gi));
            }
        }
        want_input.then(|| tr.op.backward(channels, &crop_grads))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(
            Self::KIND,
            serde_json::to_value(self.config).expect("config serialises"),
            self.params.clone(),
        )
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        Self::from_params(ckpt.config_as(Self::KIND)?, ckpt.params.clone())
    }
}

impl QualityScorer for MsLiqeModel {
    fn id(&self) -> &str {
        Self::KIND
    }

    fn range(&self) -> (f64, f64) {
        (1.0, QUALITY_LEVELS as f64)
    }

    fn score(&self, x: &ImageGrid) -> Result<f64> {
        self.predict(x)
    }

    fn score_grad(&self, x: &ImageGrid) -> Result<(f64, ImageGrid)> {
        let (q, g) = self.predict_backward(x, 1.0, None, true)?;
        Ok((q, g.expect("input gradient requested")))
    }
}

/// Images with mean opinion scores from one rating campaign. Scores from
/// different campaigns are never compared with each other.
#[derive(Clone, Debug)]
pub struct MosDataset {
    pub name: String,
    pub images: Vec<ImageGrid>,
    pub mos: Vec<f64>,
}

impl MosDataset {
    pub fn new(name: impl Into<String>, images: Vec<ImageGrid>, mos: Vec<f64>) -> Result<Self> {
        ensure!(
            images.len() == mos.len(),
            Contract,
            "{} images but {} ratings",
            images.len(),
            mos.len()
        );
        Ok(Self {
            name: name.into(),
            images,
            mos,
        })
    }

    /// Toy images under one distortion family at `levels` severities, rated
    /// linearly from `mos_range.1` (pristine) down to `mos_range.0`.
    pub fn synthetic(
        name: impl Into<String>,
        distortion: Distortion,
        sources: usize,
        size: usize,
        levels: usize,
        mos_range: (f64, f64),
        seed: u64,
    ) -> Result<Self> {
        let set = distorted_set(&toy_dataset(sources, 1, size, seed), &[distortion], levels, seed ^ 0xd15);
        let (lo, hi) = mos_range;
        let mos = set.iter().map(|s| lo + (hi - lo) * (1.0 - s.severity)).collect();
        Self::new(name, set.into_iter().map(|s| s.image).collect(), mos)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Two images of the same dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairIndex {
    pub dataset: usize,
    pub a: usize,
    pub b: usize,
}

/// Build a training pair, refusing to pair images across datasets.
pub fn training_pair(
    datasets: &[MosDataset],
    first: (usize, usize),
    second: (usize, usize),
) -> Result<PairIndex> {
    ensure!(
        first.0 == second.0,
        Contract,
        "pairs must come from one dataset (got {} and {})",
        first.0,
        second.0
    );
    let d = datasets
        .get(first.0)
        .ok_or_else(|| crate::Error::Contract(format!("no dataset {}", first.0)))?;
    ensure!(
        first.1 < d.len() && second.1 < d.len(),
        Contract,
        "image index out of range for dataset {}",
        d.name
    );
    Ok(PairIndex {
        dataset: first.0,
        a: first.1,
        b: second.1,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MsLiqeTrainConfig {
    pub steps: usize,
    pub batch_pairs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for MsLiqeTrainConfig {
    fn default() -> Self {
        Self {
            steps: 1600,
            batch_pairs: 8,
            lr: 3e-3,
            weight_decay: 1e-4,
            seed: 0,
            log_every: 100,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MsLiqeTrainReport {
    /// `(step, mean fidelity loss since the previous entry)`
    pub history: Vec<(usize, f64)>,
}

/// Fidelity loss of one pair, accumulating its parameter gradient.
pub(crate) fn pair_loss(
    model: &MsLiqeModel,
    datasets: &[MosDataset],
    pair: PairIndex,
    grads: Option<&mut [f64]>,
) -> Result<f64> {
    let d = &datasets[pair.dataset];
    let (xa, xb) = (&d.images[pair.a], &d.images[pair.b]);
    let label = pairwise_label(d.mos[pair.a], d.mos[pair.b]);
    let (ta, tb) = (model.trace(xa)?, model.trace(xb)?);
    let (qa, qb) = (expected_quality(&ta.probs), expected_quality(&tb.probs));
    let p_hat = pairwise_prob(qa, qb);
    let loss = fidelity_loss(label, p_hat)?;
    if let Some(g) = grads {
        let z = (qa - qb) / std::f64::consts::SQRT_2;
        let dq = fidelity_loss_grad(label, p_hat) * norm_pdf(z) / std::f64::consts::SQRT_2;
        model.backward(&ta, xa.channels(), dq, Some(&mut *g), false);
        model.backward(&tb, xb.channels(), -dq, Some(g), false);
    }
    Ok(loss)
}

/// Mean fidelity loss and parameter gradient over a batch of pairs.
pub fn batch_loss_grad(
    model: &MsLiqeModel,
    datasets: &[MosDataset],
    pairs: &[PairIndex],
) -> Result<(f64, Vec<f64>)> {
    let n = model.params.len();
    let parts = pairs
        .par_iter()
        .map(|&p| {
            let mut g = vec![0.0; n];
            let loss = pair_loss(model, datasets, p, Some(&mut g))?;
            Ok((loss, g))
        })
        .collect::<Result<Vec<_>>>()?;
    let k = 1.0 / pairs.len().max(1) as f64;
    let mut grads = vec![0.0; n];
    let mut loss = 0.0;
    for (l, g) in parts {
        loss += l * k;
        for (acc, v) in grads.iter_mut().zip(g) {
            *acc += v * k;
        }
    }
    Ok((loss, grads))
}

/// Train on pairs drawn within each dataset with the fidelity loss.
pub fn train_msliqe(
    datasets: &[MosDataset],
    config: MsLiqeConfig,
    cfg: &MsLiqeTrainConfig,
) -> Result<(MsLiqeModel, MsLiqeTrainReport)> {
    ensure!(datasets.len() >= 2, Config, "training needs at least two rated datasets");
    ensure!(
        datasets.iter().all(|d| d.len() >= 2),
        Config,
        "every dataset needs at least two images"
    );
    ensure!(cfg.batch_pairs >= 1 && cfg.lr > 0.0, Config, "batch size and learning rate must be positive");
    let mut model = MsLiqeModel::new(config, cfg.seed)?;
    let mut opt = AdamW::new(model.params.len(), cfg.weight_decay);
    let mut r = rng(cfg.seed ^ 0x9a1f);
    let mut history = Vec::new();
    let (mut running, mut since) = (0.0, 0usize);
    for step in 0..cfg.steps {
        let pairs: Vec<PairIndex> = (0..cfg.batch_pairs)
            .map(|_| {
                let d = r.random_range(0..datasets.len());
                let n = datasets[d].len();
                let a = r.random_range(0..n);
                let b = (a + r.random_range(1..n)) % n;
                training_pair(datasets, (d, a), (d, b))
            })
            .collect::<Result<_>>()?;
        let (loss, grads) = batch_loss_grad(&model, datasets, &pairs)?;
        opt.update(&mut model.params, &grads, cosine_lr(cfg.lr, step, cfg.steps, 0.05));
        running += loss;
        since += 1;
        if cfg.log_every > 0 && (step + 1) % cfg.log_every == 0 {
            history.push((step + 1, running / since as f64));
            running = 0.0;
            since = 0;
        }
    }
    Ok((model, MsLiqeTrainReport { history }))
}

/// Fraction of pairs with distinct ratings whose predicted order matches.
pub fn pairwise_accuracy(scorer: &dyn QualityScorer, dataset: &MosDataset) -> Result<f64> {
    let q = dataset
        .images
        .par_iter()
        .map(|x| scorer.score(x))
        .collect::<Result<Vec<f64>>>()?;
    let (mut hit, mut total) = (0usize, 0usize);
    for i in 0..q.len() {
        for j in i + 1..q.len() {
            let dm = dataset.mos[i] - dataset.mos[j];
            if dm == 0.0 {
                continue;
            }
            total += 1;
            if (q[i] - q[j]) * dm > 0.0 {
                hit += 1;
            }
        }
    }
    ensure!(total > 0, DegenerateFit, "dataset {} has no pairs with distinct ratings", dataset.name);
    Ok(hit as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::synth::toy_dataset;

    fn small_config() -> MsLiqeConfig {
        MsLiqeConfig {
            encoder: EncoderConfig {
                channels: 1,
                width: 3,
                embed_dim: 4,
            },
            pyramid: PyramidConfig {
                base: 8,
                crops_per_level: 1,
                ..Default::default()
            },
            init_temperature: 0.5,
        }
    }

    #[test]
    fn probabilities_form_a_distribution() {
        let p = level_probs(&[0.1, -0.3, 0.5, 0.2, 0.0], 0.1).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let q = expected_quality(&p);
        assert!((1.0..=5.0).contains(&q));
        // vanishing temperature approaches the arg-max level
        let sharp = level_probs(&[0.1, -0.3, 0.5, 0.2, 0.0], 1e-6).unwrap();
        assert!((expected_quality(&sharp) - 3.0).abs() < 1e-9);
        assert!(matches!(level_probs(&[0.0; 5], 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn empty_crop_set_is_a_config_error() {
        assert!(matches!(multiscale_logit(&[], &[1.0, 0.0]), Err(Error::Config(_))));
    }

    #[test]
    fn pair_helpers() {
        assert_eq!(pairwise_label(3.0, 3.0), 1.0);
        assert_eq!(pairwise_label(2.0, 3.0), 0.0);
        assert!((pairwise_prob(4.0, 4.0) - 0.5).abs() < 1e-15);
        assert!(fidelity_loss(1.0, 1.0).unwrap().abs() < 1e-15);
        assert!((fidelity_loss(1.0, 0.0).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(fidelity_loss(1.0, 1.2), Err(Error::Contract(_))));
        let h = 1e-6;
        for (p, q) in [(1.0, 0.3), (0.0, 0.8), (1.0, 0.95)] {
            let fd = (fidelity_loss(p, q + h).unwrap() - fidelity_loss(p, q - h).unwrap()) / (2.0 * h);
            assert!((fd - fidelity_loss_grad(p, q)).abs() < 1e-6);
        }
    }

    #[test]
    fn image_gradient_matches_finite_differences() {
        let model = MsLiqeModel::new(small_config(), 3).unwrap();
        let x = toy_dataset(1, 1, 12, 4).remove(0);
        let (_, g) = model.score_grad(&x).unwrap();
        let h = 1e-6;
        for i in (0..x.len()).step_by(5) {
            let mut up = x.clone();
            up.as_mut_slice()[i] += h;
            let mut dn = x.clone();
            dn.as_mut_slice()[i] -= h;
            let fd = (model.predict(&up).unwrap() - model.predict(&dn).unwrap()) / (2.0 * h);
            assert!((fd - g.as_slice()[i]).abs() < 1e-6 * (1.0 + fd.abs()), "{i}: {fd} vs {}", g.as_slice()[i]);
        }
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        let imgs = toy_dataset(3, 1, 12, 5);
        let ds = vec![MosDataset::new("a", imgs, vec![1.0, 3.0, 2.0]).unwrap()];
        let mut model = MsLiqeModel::new(small_config(), 6).unwrap();
        let pairs = [
            training_pair(&ds, (0, 0), (0, 1)).unwrap(),
            training_pair(&ds, (0, 2), (0, 1)).unwrap(),
        ];
        let (_, g) = batch_loss_grad(&model, &ds, &pairs).unwrap();
        let h = 1e-6;
        let n = model.params.len();
        for i in (0..n).step_by(7).chain([n - 1]) {
            let base = model.params[i];
            model.params[i] = base + h;
            let up = batch_loss_grad(&model, &ds, &pairs).unwrap().0;
            model.params[i] = base - h;
            let dn = batch_loss_grad(&model, &ds, &pairs).unwrap().0;
            model.params[i] = base;
            let fd = (up - dn) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-6 * (1.0 + fd.abs()), "param {i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn cross_dataset_pairs_are_refused() {
        let mk = |n: &str| MosDataset::new(n, toy_dataset(2, 1, 8, 1), vec![1.0, 2.0]).unwrap();
        let ds = vec![mk("a"), mk("b")];
        assert!(matches!(training_pair(&ds, (0, 0), (1, 1)), Err(Error::Contract(_))));
    }

    #[test]
    fn single_dataset_training_is_refused() {
        let ds = vec![MosDataset::new("a", toy_dataset(2, 1, 8, 1), vec![1.0, 2.0]).unwrap()];
        let r = train_msliqe(&ds, small_config(), &MsLiqeTrainConfig::default());
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = MsLiqeModel::new(small_config(), 8).unwrap();
        let back = MsLiqeModel::from_checkpoint(&Checkpoint::from_bytes(&model.to_checkpoint().to_bytes()).unwrap()).unwrap();
        let x = toy_dataset(1, 1, 12, 1).remove(0);
        assert_eq!(model.predict(&x).unwrap(), back.predict(&x).unwrap());
    }
}
