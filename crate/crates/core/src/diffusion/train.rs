use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::grid::Grid;
use crate::nn::{cosine_lr, AdamW};
use crate::num::Real;
use crate::synth::rng;

use super::denoiser::Denoiser;
use super::edict::forward_perturb;
use super::schedule::NoiseSchedule;

/// Per-step weight `lambda(t)` of the noise-prediction loss.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossWeighting {
    #[default]
    Uniform,
    /// Explicit weights for `t = 1..=T`.
    PerStep(Vec<f64>),
}

impl LossWeighting {
    fn validate(&self, steps: usize) -> Result<()> {
        if let LossWeighting::PerStep(w) = self {
            ensure!(
                w.len() == steps,
                Config,
                "expected {steps} per-step weights, got {}",
                w.len()
            );
            ensure!(
                w.iter().all(|v| *v > 0.0 && v.is_finite()),
                Config,
                "loss weights must be positive"
            );
        }
        Ok(())
    }

    pub fn weight(&self, t: usize) -> f64 {
        match self {
            LossWeighting::Uniform => 1.0,
            LossWeighting::PerStep(w) => w[t - 1],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub validation_size: usize,
    pub weighting: LossWeighting,
    /// Record the running training loss every this many steps.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            lr: 2e-3,
            weight_decay: 0.0,
            seed: 0,
            validation_size: 32,
            weighting: LossWeighting::Uniform,
            log_every: 100,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_validation_loss: f64,
    pub final_validation_loss: f64,
    /// `(step, mean training loss since the previous entry)`
    pub history: Vec<(usize, f64)>,
}

/// One `(x_0 index, t, eps)` draw.
struct Draw<F> {
    image: usize,
    t: usize,
    eps: Grid<F>,
}

fn draw<F: Real>(
    r: &mut impl Rng,
    dataset: &[Grid<F>],
    steps: usize,
) -> Draw<F> {
    let image = r.random_range(0..dataset.len());
    let t = r.random_range(1..=steps);
    let (c, h, w) = dataset[image].shape();
    let eps = Grid::from_fn(c, h, w, |_, _, _| {
        let n: f64 = StandardNormal.sample(r);
        F::of(n)
    });
    Draw { image, t, eps }
}

fn sample_loss<F: Real>(
    denoiser: &Denoiser<F>,
    dataset: &[Grid<F>],
    schedule: &NoiseSchedule,
    weighting: &LossWeighting,
    d: &Draw<F>,
    grads: Option<&mut [F]>,
) -> Result<f64> {
    let xt = forward_perturb(&dataset[d.image], d.t, &d.eps, schedule)?;
    let (pred, cache) = denoiser.forward_cached(&xt, d.t);
    let resid = pred.sub(&d.eps);
    let lambda = weighting.weight(d.t);
    let n = resid.len() as f64;
    let loss = lambda * resid.dot(&resid).f64() / n;
    if let Some(g) = grads {
        denoiser.backward(&cache, &resid.scale(F::of(2.0 * lambda / n)), Some(g));
    }
    Ok(loss)
}

fn validation_draws<F: Real>(dataset: &[Grid<F>], steps: usize, cfg: &TrainConfig) -> Vec<Draw<F>> {
    let mut r = rng(cfg.seed ^ 0x5eed_0f_7a11d);
    (0..cfg.validation_size.max(1))
        .map(|_| draw(&mut r, dataset, steps))
        .collect()
}

/// Weighted noise-prediction loss of `denoiser` on a fixed seeded batch.
pub fn validation_loss<F: Real>(
    denoiser: &Denoiser<F>,
    dataset: &[Grid<F>],
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<f64> {
    ensure!(!dataset.is_empty(), Config, "validation needs a non-empty dataset");
    let draws = validation_draws(dataset, schedule.steps(), cfg);
    let losses: Result<Vec<f64>> = draws
        .iter()
        .map(|d| sample_loss(denoiser, dataset, schedule, &cfg.weighting, d, None))
        .collect();
    let losses = losses?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Minimise `E[lambda(t) |eps - eps_theta(x_t; t)|^2]` with AdamW and a
/// cosine learning-rate schedule. Deterministic for a given seed.
pub fn train_denoiser<F: Real>(
    dataset: &[Grid<F>],
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    init: Denoiser<F>,
) -> Result<(Denoiser<F>, TrainReport)> {
    ensure!(!dataset.is_empty(), Config, "training dataset is empty");
    ensure!(cfg.batch_size >= 1, Config, "batch size must be positive");
    ensure!(cfg.lr > 0.0, Config, "learning rate must be positive");
    cfg.weighting.validate(schedule.steps())?;
    let shape = dataset[0].shape();
    ensure!(
        dataset.iter().all(|x| x.shape() == shape),
        Contract,
        "all training images must share one shape"
    );
    ensure!(
        shape.0 == init.config().channels,
        Contract,
        "dataset has {} channels, denoiser expects {}",
        shape.0,
        init.config().channels
    );

    let mut model = init;
    let initial = validation_loss(&model, dataset, schedule, cfg)?;
    let mut opt = AdamW::new(model.num_params(), cfg.weight_decay);
    let mut r = rng(cfg.seed);
    let mut history = Vec::new();
    let mut running = 0.0;
    let mut since_log = 0usize;

    for step in 0..cfg.steps {
        let draws: Vec<Draw<F>> = (0..cfg.batch_size)
            .map(|_| draw(&mut r, dataset, schedule.steps()))
            .collect();
        let per_sample: Result<Vec<(f64, Vec<F>)>> = draws
            .par_iter()
            .map(|d| {
                let mut g = vec![F::zero(); model.num_params()];
                let loss = sample_loss(&model, dataset, schedule, &cfg.weighting, d, Some(&mut g))?;
                Ok((loss, g))
            })
            .collect();
        let per_sample = per_sample?;
        let k = F::of(1.0 / cfg.batch_size as f64);
        let mut grads = vec![F::zero(); model.num_params()];
        let mut batch_loss = 0.0;
        for (loss, g) in &per_sample {
            batch_loss += loss;
            for (acc, &v) in grads.iter_mut().zip(g) {
                *acc += v * k;
            }
        }
        opt.update(model.params_mut(), &grads, cosine_lr(cfg.lr, step, cfg.steps, 0.05));

        running += batch_loss / cfg.batch_size as f64;
        since_log += 1;
        if cfg.log_every > 0 && (step + 1) % cfg.log_every == 0 {
            history.push((step + 1, running / since_log as f64));
            running = 0.0;
            since_log = 0;
        }
    }

    let final_loss = validation_loss(&model, dataset, schedule, cfg)?;
    Ok((
        model,
        TrainReport {
            initial_validation_loss: initial,
            final_validation_loss: final_loss,
            history,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::DenoiserConfig;
    use crate::error::Error;

    #[test]
    fn empty_dataset_is_rejected() {
        let s = NoiseSchedule::linear(4, 1e-4).unwrap();
        let d = Denoiser::<f64>::new(DenoiserConfig::default(), 0);
        let err = train_denoiser::<f64>(&[], &s, &TrainConfig::default(), d).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn zero_steps_leave_parameters_unchanged() {
        let s = NoiseSchedule::linear(4, 1e-4).unwrap();
        let d = Denoiser::<f64>::new(DenoiserConfig::default(), 0);
        let data = crate::synth::toy_dataset(2, 1, 8, 1);
        let cfg = TrainConfig {
            steps: 0,
            validation_size: 4,
            ..Default::default()
        };
        let (trained, report) = train_denoiser(&data, &s, &cfg, d.clone()).unwrap();
        assert_eq!(trained.params(), d.params());
        assert_eq!(report.initial_validation_loss, report.final_validation_loss);
    }

    #[test]
    fn per_step_weights_are_validated() {
        let s = NoiseSchedule::linear(4, 1e-4).unwrap();
        let d = Denoiser::<f64>::new(DenoiserConfig::default(), 0);
        let data = crate::synth::toy_dataset(1, 1, 8, 1);
        let cfg = TrainConfig {
            weighting: LossWeighting::PerStep(vec![1.0, 0.0, 1.0, 1.0]),
            ..Default::default()
        };
        assert!(matches!(train_denoiser(&data, &s, &cfg, d), Err(Error::Config(_))));
    }
}
