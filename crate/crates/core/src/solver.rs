//! MAP enhancement in the coupled diffusion latent space, plus the
//! pixel-space baselines it is contrasted with.
//!
//! The latent solver minimises the energy `D0(x, x_init) - lambda q(x)`
//! evaluated on both decoded branches and averaged. Scorers are expected to
//! be calibrated into a bounded range (see [`crate::quality::Calibrated`]) so
//! that one `lambda` works across models.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::{
    transform_d, transform_h_backward, transform_h_taped, CoupledState, MixingParams,
    NoisePredictor, NoiseSchedule,
};
use crate::error::{ensure, Error, Result};
use crate::grid::ImageGrid;
use crate::quality::QualityScorer;
use crate::resample::{scaled_len, BicubicResize};

/// Smoothing of the fidelity norm at the origin.
pub const FIDELITY_EPS: f64 = 1e-8;

/// `sqrt(|R x - R x_init|^2 + eps^2)` where `R` is a bicubic `1/s` downscale.
#[derive(Clone, Debug)]
pub struct Fidelity {
    shape: (usize, usize, usize),
    resize: Option<BicubicResize>,
    target: ImageGrid,
}

impl Fidelity {
    pub fn new(x_init: &ImageGrid, s: usize) -> Result<Self> {
        ensure!(s >= 1, Config, "downsampling factor must be >= 1, got {s}");
        ensure!(!x_init.is_empty(), Contract, "fidelity reference is empty");
        let (_, h, w) = x_init.shape();
        let resize = if s == 1 {
            None
        } else {
            let f = 1.0 / s as f64;
            Some(BicubicResize::new(h, w, scaled_len(h, f), scaled_len(w, f))?)
        };
        let target = match &resize {
            Some(r) => r.apply(x_init),
            None => x_init.clone(),
        };
        Ok(Self {
            shape: x_init.shape(),
            resize,
            target,
        })
    }

    fn residual(&self, x: &ImageGrid) -> Result<ImageGrid> {
        ensure!(
            x.shape() == self.shape,
            Contract,
            "fidelity shapes differ: {:?} vs {:?}",
            x.shape(),
            self.shape
        );
        let low = match &self.resize {
            Some(r) => r.apply(x),
            None => x.clone(),
        };
        Ok(low.sub(&self.target))
    }

    pub fn value(&self, x: &ImageGrid) -> Result<f64> {
        let d = self.residual(x)?;
        Ok((d.dot(&d) + FIDELITY_EPS * FIDELITY_EPS).sqrt())
    }

    pub fn value_grad(&self, x: &ImageGrid) -> Result<(f64, ImageGrid)> {
        let d = self.residual(x)?;
        let v = (d.dot(&d) + FIDELITY_EPS * FIDELITY_EPS).sqrt();
        let g = d.scale(1.0 / v);
        let g = match &self.resize {
            Some(r) => r.apply_transpose(&g),
            None => g,
        };
        Ok((v, g))
    }
}

pub fn fidelity_d0(x: &ImageGrid, x_init: &ImageGrid, s: usize) -> Result<f64> {
    x.check_same_shape(x_init, "fidelity")?;
    Fidelity::new(x_init, s)?.value(x)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnhanceConfig {
    pub lambda: f64,
    pub lr: f64,
    pub momentum: f64,
    pub max_iter: usize,
    pub downsample: usize,
    pub steps: usize,
    /// Coupling weight; `None` uses `0.93^(50 / steps)`.
    pub p: Option<f64>,
    /// Minimise `energy / lambda` instead, so very large `lambda` stays well
    /// scaled.
    pub normalize: bool,
}

impl Default for EnhanceConfig {
    fn default() -> Self {
        Self {
            lambda: 0.01,
            lr: 2.0,
            momentum: 0.9,
            max_iter: 40,
            downsample: 4,
            steps: 20,
            p: None,
            normalize: false,
        }
    }
}

impl EnhanceConfig {
    pub fn validate(&self) -> Result<()> {
        self.check(1)
    }

    fn check(&self, min_iter: usize) -> Result<()> {
        ensure!(self.lambda >= 0.0 && self.lambda.is_finite(), Config, "lambda must be finite and >= 0, got {}", self.lambda);
        ensure!(self.lr > 0.0 && self.lr.is_finite(), Config, "learning rate must be > 0, got {}", self.lr);
        ensure!((0.0..1.0).contains(&self.momentum), Config, "momentum must lie in [0, 1), got {}", self.momentum);
        ensure!(self.max_iter >= min_iter, Config, "max_iter must be >= {min_iter}, got {}", self.max_iter);
        ensure!(self.downsample >= 1, Config, "downsample must be >= 1");
        ensure!(self.steps >= 1, Config, "steps must be >= 1");
        ensure!(!self.normalize || self.lambda > 0.0, Config, "normalize needs lambda > 0");
        self.mixing()?;
        Ok(())
    }

    pub fn mixing(&self) -> Result<MixingParams> {
        match self.p {
            Some(p) => MixingParams::new(p),
            None => Ok(MixingParams::default_for_steps(self.steps)),
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, NoiseSchedule::DEFAULT_FLOOR)
    }
}

/// Averaged terms of one iteration, evaluated before its update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub fidelity: f64,
    pub prior: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct EnhanceResult {
    pub x_star: ImageGrid,
    pub y_star: ImageGrid,
    pub trace: Vec<TraceRow>,
    /// Terms at the returned pair.
    pub final_terms: TraceRow,
    /// `max |x* - y*|`
    pub divergence: f64,
    /// Set when the run stopped early on a non-finite value.
    pub aborted: Option<String>,
}

impl EnhanceResult {
    pub fn initial_energy(&self) -> f64 {
        self.trace.first().map_or(self.final_terms.total, |r| r.total)
    }

    pub fn final_energy(&self) -> f64 {
        self.final_terms.total
    }

    pub fn write_trace_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_trace_csv(&self.trace, path)
    }
}

pub fn write_trace_csv(rows: &[TraceRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_rows(std::io::BufWriter::new(file), rows)
}

/// The per-image loss of the latent solvers.
struct Objective<'a> {
    scorer: &'a dyn QualityScorer,
    /// Fidelity references of the x and y branches.
    fidelity: Option<(Fidelity, Fidelity)>,
    downsample: usize,
    lambda: f64,
    /// Multiplies the whole energy.
    scale: f64,
}

impl Objective<'_> {
    /// Measure fidelity against the given pair instead.
    fn anchor(&mut self, x: &ImageGrid, y: &ImageGrid) -> Result<()> {
        if self.fidelity.is_some() {
            self.fidelity = Some((Fidelity::new(x, self.downsample)?, Fidelity::new(y, self.downsample)?));
        }
        Ok(())
    }

    /// `(fidelity, prior, total)` and the gradient of `total`.
    fn eval(&self, x: &ImageGrid, fidelity: Option<&Fidelity>) -> Result<((f64, f64, f64), ImageGrid)> {
        let (q, gq) = self.scorer.score_grad(x)?;
        let (d, mut g) = match fidelity {
            Some(f) => f.value_grad(x)?,
            None => (0.0, ImageGrid::zeros_like(x)),
        };
        g.axpy(-self.lambda, &gq);
        let total = self.scale * (d - self.lambda * q);
        Ok(((d, q, total), g.scale(self.scale)))
    }

    fn pair(&self, iteration: usize, x: &ImageGrid, y: &ImageGrid) -> Result<(TraceRow, ImageGrid, ImageGrid)> {
        let (fx, fy) = match &self.fidelity {
            Some((fx, fy)) => (Some(fx), Some(fy)),
            None => (None, None),
        };
        let ((dx, qx, tx), gx) = self.eval(x, fx)?;
        let ((dy, qy, ty), gy) = self.eval(y, fy)?;
        let row = TraceRow {
            iteration,
            fidelity: 0.5 * (dx + dy),
            prior: 0.5 * (qx + qy),
            total: 0.5 * (tx + ty),
        };
        Ok((row, gx.scale(0.5), gy.scale(0.5)))
    }
}

fn finite_row(r: &TraceRow) -> bool {
    r.fidelity.is_finite() && r.prior.is_finite() && r.total.is_finite()
}

fn run_latent(
    x_init: &ImageGrid,
    denoiser: &impl NoisePredictor<f64>,
    cfg: &EnhanceConfig,
    mut objective: Objective,
) -> Result<EnhanceResult> {
    let schedule = cfg.schedule()?;
    let mix = cfg.mixing()?;
    let mut latent = transform_d(x_init, denoiser, &schedule, mix)?;
    let mut mx = ImageGrid::zeros_like(x_init);
    let mut my = ImageGrid::zeros_like(x_init);
    let mut trace = Vec::with_capacity(cfg.max_iter);
    // last decoded pair whose terms were all finite
    let mut last: Option<(ImageGrid, ImageGrid, TraceRow)> = None;
    let abort = |last: Option<(ImageGrid, ImageGrid, TraceRow)>, trace, why: String| {
        let (x, y, row) = last.ok_or_else(|| Error::Contract(format!("{why} at the initial latent")))?;
        Ok(EnhanceResult {
            divergence: x.max_abs_diff(&y),
            x_star: x,
            y_star: y,
            trace,
            final_terms: row,
            aborted: Some(why),
        })
    };

    for k in 0..=cfg.max_iter {
        if !latent.x.is_finite() || !latent.y.is_finite() {
            return abort(last, trace, format!("latent became non-finite before iteration {k}"));
        }
        let (x, y, tape) = transform_h_taped(&latent, denoiser, &schedule, mix)?;
        if !x.is_finite() || !y.is_finite() {
            return abort(last, trace, format!("decoded image non-finite at iteration {k}"));
        }
        if k == 0 {
            // the round trip is exact only to rounding; anchoring fidelity
            // on the decoded start keeps lambda = 0 a fixed point
            objective.anchor(&x, &y)?;
        }
        let (row, gx, gy) = objective.pair(k, &x, &y)?;
        if !finite_row(&row) || !gx.is_finite() || !gy.is_finite() {
            return abort(last, trace, format!("non-finite loss at iteration {k}"));
        }
        if k == cfg.max_iter {
            return Ok(EnhanceResult {
                divergence: x.max_abs_diff(&y),
                x_star: x,
                y_star: y,
                trace,
                final_terms: row,
                aborted: None,
            });
        }
        trace.push(row);
        let (gxt, gyt) = transform_h_backward(&tape, denoiser, &schedule, mix, &gx, &gy)?;
        mx = mx.lin_comb(cfg.momentum, &gxt, -cfg.lr);
        my = my.lin_comb(cfg.momentum, &gyt, -cfg.lr);
        latent = CoupledState::new(latent.x.add(&mx), latent.y.add(&my), latent.t)?;
        last = Some((x, y, row));
    }
    unreachable!("loop returns at k == max_iter")
}

/// Averaged coupled energy of a latent and its gradient with respect to
/// `(x_T, y_T)`, as one iteration of [`solve_map_latent`] sees it.
pub fn latent_energy_grad(
    latent: &CoupledState,
    x_init: &ImageGrid,
    scorer: &dyn QualityScorer,
    denoiser: &impl NoisePredictor<f64>,
    cfg: &EnhanceConfig,
) -> Result<(TraceRow, ImageGrid, ImageGrid)> {
    cfg.validate()?;
    let objective = map_objective(x_init, scorer, cfg)?;
    let schedule = cfg.schedule()?;
    let mix = cfg.mixing()?;
    let (x, y, tape) = transform_h_taped(latent, denoiser, &schedule, mix)?;
    let (row, gx, gy) = objective.pair(0, &x, &y)?;
    let (gxt, gyt) = transform_h_backward(&tape, denoiser, &schedule, mix, &gx, &gy)?;
    Ok((row, gxt, gyt))
}

fn map_objective<'a>(x_init: &ImageGrid, scorer: &'a dyn QualityScorer, cfg: &EnhanceConfig) -> Result<Objective<'a>> {
    let f = Fidelity::new(x_init, cfg.downsample)?;
    Ok(Objective {
        scorer,
        fidelity: Some((f.clone(), f)),
        downsample: cfg.downsample,
        lambda: cfg.lambda,
        scale: if cfg.normalize { 1.0 / cfg.lambda } else { 1.0 },
    })
}

/// Latent-space MAP estimation: encode, then momentum descent on both
/// latents of the averaged coupled energy, backpropagating through the full
/// decoding chain (both decoded images depend on both latents).
pub fn solve_map_latent(
    x_init: &ImageGrid,
    scorer: &dyn QualityScorer,
    denoiser: &impl NoisePredictor<f64>,
    cfg: &EnhanceConfig,
) -> Result<EnhanceResult> {
    cfg.validate()?;
    let objective = map_objective(x_init, scorer, cfg)?;
    run_latent(x_init, denoiser, cfg, objective)
}

/// The same solver without the fidelity term: only `-q` is descended.
/// `lambda`, `downsample` and `normalize` are ignored; `max_iter = 0` is a
/// plain round trip.
pub fn maximize_latent(
    x_init: &ImageGrid,
    scorer: &dyn QualityScorer,
    denoiser: &impl NoisePredictor<f64>,
    cfg: &EnhanceConfig,
) -> Result<EnhanceResult> {
    let cfg = EnhanceConfig {
        lambda: 1.0,
        normalize: false,
        ..*cfg
    };
    cfg.check(0)?;
    let objective = Objective {
        scorer,
        fidelity: None,
        downsample: 1,
        lambda: 1.0,
        scale: 1.0,
    };
    run_latent(x_init, denoiser, &cfg, objective)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PixelConfig {
    pub lambda: f64,
    pub lr: f64,
    pub steps: usize,
    /// Descend `MSE / lambda - q` instead.
    pub normalize: bool,
}

impl Default for PixelConfig {
    fn default() -> Self {
        Self {
            lambda: 0.01,
            lr: 0.5,
            steps: 40,
            normalize: false,
        }
    }
}

impl PixelConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.lambda >= 0.0 && self.lambda.is_finite(), Config, "lambda must be finite and >= 0, got {}", self.lambda);
        ensure!(self.lr > 0.0 && self.lr.is_finite(), Config, "learning rate must be > 0, got {}", self.lr);
        ensure!(!self.normalize || self.lambda > 0.0, Config, "normalize needs lambda > 0");
        Ok(())
    }
}

pub fn mse(a: &ImageGrid, b: &ImageGrid) -> f64 {
    let d = a.sub(b);
    d.dot(&d) / d.len() as f64
}

fn check_pixel_input(x: &ImageGrid) -> Result<()> {
    ensure!(!x.is_empty() && x.is_finite(), Contract, "input image must be finite and non-empty");
    Ok(())
}

/// Gradient descent on `MSE(x, x_init) - lambda q(x)` in pixel space.
pub fn solve_map_pixel(x_init: &ImageGrid, scorer: &dyn QualityScorer, cfg: &PixelConfig) -> Result<ImageGrid> {
    cfg.validate()?;
    check_pixel_input(x_init)?;
    let scale = if cfg.normalize { 1.0 / cfg.lambda } else { 1.0 };
    let n = x_init.len() as f64;
    let mut x = x_init.clone();
    for k in 0..cfg.steps {
        let mut g = x.sub(x_init).scale(2.0 / n);
        if cfg.lambda > 0.0 {
            let (_, gq) = scorer.score_grad(&x)?;
            g.axpy(-cfg.lambda, &gq);
        }
        let next = x.lin_comb(1.0, &g, -cfg.lr * scale);
        if !next.is_finite() {
            return Err(Error::Contract(format!("pixel solver diverged at step {k}")));
        }
        x = next;
    }
    Ok(x)
}

/// Plain gradient ascent on `q` from `x_init`.
pub fn maximize_direct(x_init: &ImageGrid, scorer: &dyn QualityScorer, steps: usize, lr: f64) -> Result<ImageGrid> {
    ensure!(lr > 0.0 && lr.is_finite(), Config, "learning rate must be > 0, got {lr}");
    check_pixel_input(x_init)?;
    let mut x = x_init.clone();
    for k in 0..steps {
        let (_, g) = scorer.score_grad(&x)?;
        let next = x.lin_comb(1.0, &g, lr);
        if !next.is_finite() {
            return Err(Error::Contract(format!("direct maximisation diverged at step {k}")));
        }
        x = next;
    }
    Ok(x)
}

/// Trace rows as CSV with header `iteration,fidelity,prior,total`.
pub fn write_rows(mut out: impl Write, rows: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(&mut out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::Format(e.to_string()))?;
    Ok(())
}
