//! Exact diffusion inversion through coupled affine updates.
//!
//! Two equal-shape states `x` and `y` are denoised alternately, each step
//! conditioning one state's noise estimate on the other, followed by a
//! mixing blend with weight `p`. Every update is affine in the state being
//! changed, so the whole chain inverts algebraically. [`transform_d`] maps
//! an image to the coupled latent `(x_T, y_T)`, and [`transform_h`] maps a
//! latent back to images. Both have taped variants that support reverse-mode
//! gradients.

use crate::error::{ensure, Error, Result};
use crate::grid::Grid;
use crate::num::Real;

use super::denoiser::NoisePredictor;
use super::schedule::NoiseSchedule;

/// Coupling blend weight `p` in `(0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixingParams {
    p: f64,
}

impl MixingParams {
    pub fn new(p: f64) -> Result<Self> {
        ensure!(
            p > 0.0 && p <= 1.0,
            Config,
            "mixing weight must lie in (0, 1], got {p}"
        );
        Ok(Self { p })
    }

    /// `0.93^(50 / T)`
    pub fn default_for_steps(steps: usize) -> Self {
        Self {
            p: 0.93f64.powf(50.0 / steps as f64),
        }
    }

    pub fn p(&self) -> f64 {
        self.p
    }
}

/// The coupled pair `(x_t, y_t)` at step `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct CoupledState<F = f64> {
    pub x: Grid<F>,
    pub y: Grid<F>,
    pub t: usize,
}

impl<F: Real> CoupledState<F> {
    pub fn new(x: Grid<F>, y: Grid<F>, t: usize) -> Result<Self> {
        x.check_same_shape(&y, "coupled state")?;
        Ok(Self { x, y, t })
    }

    /// Both branches equal to `x`.
    pub fn tied(x: Grid<F>, t: usize) -> Self {
        Self { y: x.clone(), x, t }
    }

    pub fn divergence(&self) -> F {
        self.x.max_abs_diff(&self.y)
    }
}

fn coeffs<F: Real>(schedule: &NoiseSchedule, t: usize) -> Result<(F, F)> {
    let (a, b) = schedule.coefficients(t)?;
    Ok((F::of(a), F::of(b)))
}

/// `sqrt(alpha_t) x0 + sqrt(1 - alpha_t) eps`
pub fn forward_perturb<F: Real>(
    x0: &Grid<F>,
    t: usize,
    eps: &Grid<F>,
    schedule: &NoiseSchedule,
) -> Result<Grid<F>> {
    x0.check_same_shape(eps, "forward_perturb noise")?;
    ensure!(t <= schedule.steps(), Contract, "step {t} beyond T = {}", schedule.steps());
    let alpha = schedule.alpha(t);
    Ok(x0.lin_comb(F::of(alpha.sqrt()), eps, F::of((1.0 - alpha).sqrt())))
}

/// One deterministic DDIM update `a_t x_t + b_t eps(x_t; t)`.
pub fn ddim_step<F: Real>(
    xt: &Grid<F>,
    t: usize,
    predictor: &impl NoisePredictor<F>,
    schedule: &NoiseSchedule,
) -> Result<Grid<F>> {
    let (a, b) = coeffs::<F>(schedule, t)?;
    Ok(xt.lin_comb(a, &predictor.predict(xt, t), b))
}

/// The coupled update without mixing:
/// `x_{t-1} = a x_t + b eps(y_t)`, `y_{t-1} = a y_t + b eps(x_{t-1})`.
pub fn unmixed_coupled_step<F: Real>(
    state: &CoupledState<F>,
    predictor: &impl NoisePredictor<F>,
    schedule: &NoiseSchedule,
) -> Result<CoupledState<F>> {
    let t = state.t;
    let (a, b) = coeffs::<F>(schedule, t)?;
    let x = state.x.lin_comb(a, &predictor.predict(&state.y, t), b);
    let y = state.y.lin_comb(a, &predictor.predict(&x, t), b);
    Ok(CoupledState { x, y, t: t - 1 })
}

struct DenoiseParts<F> {
    state: CoupledState<F>,
    x_prime: Grid<F>,
}

fn denoise_parts<F: Real>(
    state: &CoupledState<F>,
    predictor: &impl NoisePredictor<F>,
    schedule: &NoiseSchedule,
    mix: MixingParams,
) -> Result<DenoiseParts<F>> {
    let t = state.t;
    let (a, b) = coeffs::<F>(schedule, t)?;
    let p = F::of(mix.p);
    let q = F::one() - p;
    let x_prime = state.x.lin_comb(a, &predictor.predict(&state.y, t), b);
    let y_prime = state.y.lin_comb(a, &predictor.predict(&x_prime, t), b);
    let x = x_prime.lin_comb(p, &y_prime, q);
    let y = y_prime.lin_comb(p, &x, q);
    Ok(DenoiseParts {
        state: CoupledState { x, y, t: t - 1 },
        x_prime,
    })
}

/// Step `t -> t-1`: the two coupled updates followed by the two mixing
/// blends.
pub fn edict_denoise_step<F: Real>(
    state: &CoupledState<F>,
    predictor: &impl NoisePredictor<F>,
    schedule: &NoiseSchedule,
    mix: MixingParams,
) -> Result<CoupledState<F>> {
    Ok(denoise_parts(state, predictor, schedule, mix)?.state)
}

struct NoiseParts<F> {
    state: CoupledState<F>,
    x_prime: Grid<F>,
}

fn noise_parts<F: Real>(
    state: &CoupledState<F>,
    predictor: &impl NoisePredictor<F>,
    schedule: &NoiseSchedule,
    mix: MixingParams,
) -> Result<NoiseParts<F>> {
    ensure!(
        state.t < schedule.steps(),
        Contract,
        "state already at t = T = {}",
        schedule.steps()
    );
    let t = state.t + 1;
    let (a, b) = coeffs::<F>(schedule, t)?;
    let p = F::of(mix.p);
    let q = F::one() - p;
    let y_prime = state.y.lin_comb(F::one(), &state.x, -q).map(|v| v / p);
    let x_prime = state.x.lin_comb(F::one(), &y_prime, -q).map(|v| v / p);
    let y = y_prime
        .lin_comb(F::one(), &predictor.predict(&x_prime, t), -b)
        .map(|v| v / a);
    let x = x_prime
        .lin_comb(F::one(), &predictor.predict(&y, t), -b)
        .map(|v| v / a);
    Ok(NoiseParts {
        state: CoupledState { x, y, t },
        x_prime,
    })
}

/// Step `t-1 -> t`, the exact inverse of [`edict_denoise_step`] at `t`.
pub fn edict_noise_step<F: Real>(
    state: &CoupledState<F>,
    predictor: &impl NoisePredictor<F>,
    schedule: &NoiseSchedule,
    mix: MixingParams,
) -> Result<CoupledState<F>> {
    Ok(noise_parts(state, predictor, schedule, mix)?.state)
}

fn check_finite<F: Real>(x: &Grid<F>, what: &str) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::Contract(format!("{what} contains non-finite values")))
    }
}

/// Image to coupled latent: start from `(x0, x0)` and apply the noising
/// step for `t = 1..=T`.
pub fn transform_d<F: Real>(
    x0: &Grid<F>,
    predictor: &impl NoisePredictor<F>,
    schedule: &NoiseSchedule,
    mix: MixingParams,
) -> Result<CoupledState<F>> {
    Ok(transform_d_taped(x0, predictor, schedule, mix)?.0)
}

/// Per-step values the noising chain needs for its backward pass.
#[derive(Clone, Debug)]
pub struct EncodeTape<F> {
    steps: Vec<(usize, Grid<F>, Grid<F>)>,
}

pub fn transform_d_taped<F: Real>(
    x0: &Grid<F>,
    predictor: &impl NoisePredictor<F>,
    schedule: &NoiseSchedule,
    mix: MixingParams,
) -> Result<(CoupledState<F>, EncodeTape<F>)> {
    check_finite(x0, "transform_d input")?;
    let mut state = CoupledState::tied(x0.clone(), 0);
    let mut steps = Vec::with_capacity(schedule.steps());
    while state.t < schedule.steps() {
        let parts = noise_parts(&state, predictor, schedule, mix)?;
        steps.push((parts.state.t, parts.state.y.clone(), parts.x_prime));
        state = parts.state;
    }
    Ok((state, EncodeTape { steps }))
}

/// Gradients of a loss on `(x_T, y_T)` pulled back to `(x_0, y_0)`.
pub fn transform_d_backward<F: Real>(
    tape: &EncodeTape<F>,
    predictor: &impl NoisePredictor<F>,
    schedule: &NoiseSchedule,
    mix: MixingParams,
    grad_x: &Grid<F>,
    grad_y: &Grid<F>,
) -> Result<(Grid<F>, Grid<F>)> {
    let p = F::of(mix.p);
    let q = F::one() - p;
    let mut gx = grad_x.clone();
    let mut gy = grad_y.clone();
    for (t, y, x_prime) in tape.steps.iter().rev() {
        let (a, b) = coeffs::<F>(schedule, *t)?;
        // x = (x' - b eps(y)) / a
        let mut g_xp = gx.scale(F::one() / a);
        let g_y = gy.add(&predictor.vjp(y, *t, &gx.scale(-b / a)));
        // y = (y' - b eps(x')) / a
        let mut g_yp = g_y.scale(F::one() / a);
        g_xp.axpy(F::one(), &predictor.vjp(x_prime, *t, &g_y.scale(-b / a)));
        // x' = (x_prev - q y') / p
        let mut g_xn = g_xp.scale(F::one() / p);
        g_yp.axpy(-q / p, &g_xp);
        // y' = (y_prev - q x_prev) / p
        let g_yn = g_yp.scale(F::one() / p);
        g_xn.axpy(-q / p, &g_yp);
        gx = g_xn;
        gy = g_yn;
    }
    Ok((gx, gy))
}

/// Coupled latent to images: apply the denoising step for `t = T..=1`.
pub fn transform_h<F: Real>(
    state: &CoupledState<F>,
    predictor: &impl NoisePredictor<F>,
    schedule: &NoiseSchedule,
    mix: MixingParams,
) -> Result<(Grid<F>, Grid<F>)> {
    let (x, y, _) = transform_h_taped(state, predictor, schedule, mix)?;
    Ok((x, y))
}

/// Per-step values the denoising chain needs for its backward pass.
#[derive(Clone, Debug)]
pub struct DecodeTape<F> {
    steps: Vec<(usize, Grid<F>, Grid<F>)>,
}

pub fn transform_h_taped<F: Real>(
    state: &CoupledState<F>,
    predictor: &impl NoisePredictor<F>,
    schedule: &NoiseSchedule,
    mix: MixingParams,
) -> Result<(Grid<F>, Grid<F>, DecodeTape<F>)> {
    ensure!(
        state.t == schedule.steps(),
        Contract,
        "transform_h expects a latent at t = T = {}, got t = {}",
        schedule.steps(),
        state.t
    );
    check_finite(&state.x, "latent x")?;
    check_finite(&state.y, "latent y")?;
    let mut cur = state.clone();
    let mut steps = Vec::with_capacity(schedule.steps());
    while cur.t > 0 {
        let t = cur.t;
        let parts = denoise_parts(&cur, predictor, schedule, mix)?;
        steps.push((t, cur.y, parts.x_prime));
        cur = parts.state;
    }
    Ok((cur.x, cur.y, DecodeTape { steps }))
}

/// Gradients of a loss on `(x_0, y_0)` pulled back to the latent
/// `(x_T, y_T)`. Both decoded images depend on both latents through the
/// coupling, and the full chain is followed.
pub fn transform_h_backward<F: Real>(
    tape: &DecodeTape<F>,
    predictor: &impl NoisePredictor<F>,
    schedule: &NoiseSchedule,
    mix: MixingParams,
    grad_x: &Grid<F>,
    grad_y: &Grid<F>,
) -> Result<(Grid<F>, Grid<F>)> {
    let p = F::of(mix.p);
    let q = F::one() - p;
    let mut gx = grad_x.clone();
    let mut gy = grad_y.clone();
    for (t, y, x_prime) in tape.steps.iter().rev() {
        let (a, b) = coeffs::<F>(schedule, *t)?;
        // y_new = p y' + q x_new
        let mut g_yp = gy.scale(p);
        let g_xn = gx.lin_comb(F::one(), &gy, q);
        // x_new = p x' + q y'
        let mut g_xp = g_xn.scale(p);
        g_yp.axpy(q, &g_xn);
        // y' = a y + b eps(x')
        let mut g_y = g_yp.scale(a);
        g_xp.axpy(F::one(), &predictor.vjp(x_prime, *t, &g_yp.scale(b)));
        // x' = a x + b eps(y)
        let g_x = g_xp.scale(a);
        g_y.axpy(F::one(), &predictor.vjp(y, *t, &g_xp.scale(b)));
        gx = g_x;
        gy = g_y;
    }
    Ok((gx, gy))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{Denoiser, DenoiserConfig, ZeroPredictor};
    use crate::synth::rng;
    use rand::Rng;

    fn rand_grid(seed: u64, c: usize, h: usize, w: usize) -> Grid<f64> {
        let mut r = rng(seed);
        Grid::from_fn(c, h, w, |_, _, _| r.random_range(-1.0..1.0))
    }

    #[test]
    fn forward_perturb_endpoints() {
        let s = NoiseSchedule::from_alphas(vec![1.0, 0.25, 1e-4]).unwrap();
        let x0 = rand_grid(1, 1, 4, 4);
        let eps = rand_grid(2, 1, 4, 4);
        assert_eq!(forward_perturb(&x0, 0, &eps, &s).unwrap(), x0);
        let noisy = forward_perturb(&x0, 2, &eps, &s).unwrap();
        assert!(noisy.max_abs_diff(&eps) < 0.02);
        let z = forward_perturb(&Grid::zeros(1, 2, 2), 1, &Grid::full(1, 2, 2, 1.0), &s).unwrap();
        assert!(z.as_slice().iter().all(|v| (v - 0.75f64.sqrt()).abs() < 1e-15));
        assert!(forward_perturb(&x0, 3, &eps, &s).is_err());
        assert!(forward_perturb(&x0, 1, &Grid::zeros(1, 4, 5), &s).is_err());
    }

    #[test]
    fn ddim_identity_and_zero_estimate() {
        let s = NoiseSchedule::from_alphas(vec![1.0, 0.5, 0.5]).unwrap();
        let d = Denoiser::<f64>::new(DenoiserConfig::default(), 2);
        let x = rand_grid(3, 1, 4, 4);
        assert_eq!(ddim_step(&x, 2, &d, &s).unwrap(), x);
        let (a, _) = s.coefficients(1).unwrap();
        assert_eq!(ddim_step(&x, 1, &ZeroPredictor, &s).unwrap(), x.scale(a));
        assert!(ddim_step(&x, 0, &d, &s).is_err());
    }

    #[test]
    fn mixing_weight_domain() {
        assert!(MixingParams::new(0.0).is_err());
        assert!(MixingParams::new(1.5).is_err());
        assert!(MixingParams::new(1.0).is_ok());
        let p = MixingParams::default_for_steps(50);
        assert!((p.p() - 0.93).abs() < 1e-15);
    }

    #[test]
    fn zero_predictor_steps_are_linear() {
        let s = NoiseSchedule::linear(4, 1e-4).unwrap();
        let one = MixingParams::new(1.0).unwrap();
        let st = CoupledState::new(rand_grid(4, 1, 4, 4), rand_grid(5, 1, 4, 4), 3).unwrap();
        let (a, _) = s.coefficients(3).unwrap();
        let next = edict_denoise_step(&st, &ZeroPredictor, &s, one).unwrap();
        assert_eq!(next.x, st.x.scale(a));
        assert_eq!(next.y, st.y.scale(a));
        let back = edict_noise_step(&next, &ZeroPredictor, &s, one).unwrap();
        assert!(back.x.max_abs_diff(&st.x) < 1e-15);

        let x0 = rand_grid(6, 1, 4, 4);
        let latent = transform_d(&x0, &ZeroPredictor, &s, one).unwrap();
        let prod: f64 = (1..=4).map(|t| s.coefficients(t).unwrap().0).product();
        assert!(latent.x.max_abs_diff(&x0.scale(1.0 / prod)) < 1e-15);
    }

    #[test]
    fn tied_state_stays_tied_under_symmetric_updates_without_mixing() {
        let s = NoiseSchedule::linear(5, 1e-4).unwrap();
        let d = Denoiser::<f64>::new(DenoiserConfig::default(), 8);
        let one = MixingParams::new(1.0).unwrap();
        let latent = CoupledState::tied(rand_grid(7, 1, 8, 8), 5);
        // with zero prediction both branches see identical inputs at every step
        let (x, y) = transform_h(&latent, &ZeroPredictor, &s, one).unwrap();
        assert_eq!(x, y);
        // a real network sees x' instead of x for the second branch
        let (x, y) = transform_h(&latent, &d, &s, one).unwrap();
        assert_eq!(x.shape(), y.shape());
    }

    #[test]
    fn transform_h_requires_latent_at_t() {
        let s = NoiseSchedule::linear(3, 1e-4).unwrap();
        let st = CoupledState::tied(Grid::<f64>::zeros(1, 4, 4), 2);
        let mix = MixingParams::default_for_steps(3);
        assert!(matches!(transform_h(&st, &ZeroPredictor, &s, mix), Err(Error::Contract(_))));
        let nan = Grid::full(1, 4, 4, f64::NAN);
        assert!(matches!(transform_d(&nan, &ZeroPredictor, &s, mix), Err(Error::Contract(_))));
    }
}
