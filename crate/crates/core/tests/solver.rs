use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::OnceLock;

use dlmap_core::diffusion::{
    train_denoiser, transform_d, CoupledState, Denoiser, DenoiserConfig, MixingParams,
    NoiseSchedule, TrainConfig,
};
use dlmap_core::grid::ImageGrid;
use dlmap_core::quality::{
    Calibrated, GradientSharpness, LogisticParams, NegTotalVariation, QualityScorer,
};
use dlmap_core::solver::{
    fidelity_d0, latent_energy_grad, maximize_direct, maximize_latent, mse, solve_map_latent,
    solve_map_pixel, EnhanceConfig, PixelConfig, FIDELITY_EPS,
};
use dlmap_core::synth;
use dlmap_core::Error;
use proptest::prelude::*;
use rand::Rng;

const SIZE: usize = 16;

fn denoiser() -> &'static Denoiser<f64> {
    static D: OnceLock<Denoiser<f64>> = OnceLock::new();
    D.get_or_init(|| {
        let data = synth::toy_dataset(64, 1, SIZE, 100);
        let sched = NoiseSchedule::linear(20, NoiseSchedule::DEFAULT_FLOOR).unwrap();
        let cfg = TrainConfig {
            steps: 300,
            ..Default::default()
        };
        train_denoiser(&data, &sched, &cfg, Denoiser::new(DenoiserConfig::default(), 0))
            .unwrap()
            .0
    })
}

/// Blurred toy images.
fn fixtures() -> Vec<ImageGrid> {
    synth::toy_dataset(5, 1, SIZE, 900)
        .iter()
        .map(|x| synth::gaussian_blur(x, 1.2))
        .collect()
}

/// Sharpness calibrated on blurred and sharp toy images.
fn scorer() -> Calibrated<GradientSharpness> {
    let scores: Vec<f64> = synth::toy_dataset(32, 1, SIZE, 901)
        .iter()
        .flat_map(|x| [0.0, 0.6, 1.2].map(|s| GradientSharpness.score(&synth::gaussian_blur(x, s)).unwrap()))
        .collect();
    Calibrated::new(GradientSharpness, LogisticParams::from_scores(&scores).unwrap())
}

/// A step size at which the toy latent map is well conditioned.
fn stable(lambda: f64) -> EnhanceConfig {
    EnhanceConfig {
        lambda,
        lr: 1e-6,
        ..Default::default()
    }
}

fn rand_grid(seed: u64, h: usize, w: usize, scale: f64) -> ImageGrid {
    let mut r = synth::rng(seed);
    ImageGrid::from_fn(1, h, w, |_, _, _| scale * r.random_range(-1.0..1.0))
}

#[test]
fn constant_offset_at_full_resolution_is_c_root_m() {
    let x = synth::toy_dataset(1, 1, SIZE, 3).remove(0);
    for c in [0.3, -0.05] {
        let shifted = x.map(|v| v + c);
        let d = fidelity_d0(&shifted, &x, 1).unwrap();
        assert!((d - c.abs() * 16.0).abs() < 1e-9, "{d}");
    }
    assert_eq!(fidelity_d0(&x, &x, 4).unwrap(), FIDELITY_EPS);
}

#[test]
fn block_zero_mean_detail_is_invisible_after_downsampling() {
    let x = synth::toy_dataset(1, 1, 32, 4).remove(0);
    let checker = ImageGrid::from_fn(1, 32, 32, |_, y, x| if (x + y) % 2 == 0 { 0.2 } else { -0.2 });
    let full = fidelity_d0(&x.add(&checker), &x, 1).unwrap();
    let low = fidelity_d0(&x.add(&checker), &x, 4).unwrap();
    assert!((full - 6.4).abs() < 1e-9);
    // symmetric taps cancel the alternation exactly; only the renormalised
    // border taps leave a trace
    assert!(low < 1e-3 * full, "{low}");
}

#[test]
fn shape_mismatch_is_rejected() {
    let a = rand_grid(1, 8, 8, 1.0);
    let b = rand_grid(1, 8, 12, 1.0);
    assert!(matches!(fidelity_d0(&a, &b, 2), Err(Error::Contract(_))));
}

#[test]
fn latent_gradient_matches_central_differences() {
    let d = Denoiser::<f64>::new(DenoiserConfig::default(), 7);
    let cfg = EnhanceConfig {
        lambda: 0.5,
        downsample: 2,
        steps: 4,
        ..Default::default()
    };
    let sched = NoiseSchedule::linear(4, NoiseSchedule::DEFAULT_FLOOR).unwrap();
    let x_init = rand_grid(10, 8, 8, 0.8);
    let mut latent = transform_d(&x_init, &d, &sched, MixingParams::default_for_steps(4)).unwrap();
    // move off the non-smooth origin of the fidelity
    latent.x.axpy(1.0, &rand_grid(11, 8, 8, 0.01));
    latent.y.axpy(1.0, &rand_grid(12, 8, 8, 0.01));
    let scorer = NegTotalVariation::default();
    let (_, gx, gy) = latent_energy_grad(&latent, &x_init, &scorer, &d, &cfg).unwrap();
    let energy = |s: &CoupledState| latent_energy_grad(s, &x_init, &scorer, &d, &cfg).unwrap().0.total;
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for i in 0..64 {
        for (branch, g) in [(0, &gx), (1, &gy)] {
            let mut up = latent.clone();
            let mut dn = latent.clone();
            let (u, v) = if branch == 0 { (&mut up.x, &mut dn.x) } else { (&mut up.y, &mut dn.y) };
            u.as_mut_slice()[i] += h;
            v.as_mut_slice()[i] -= h;
            let fd = (energy(&up) - energy(&dn)) / (2.0 * h);
            let a = g.as_slice()[i];
            worst = worst.max((fd - a).abs() / fd.abs().max(a.abs()).max(1e-6));
        }
    }
    assert!(worst <= 1e-3, "worst relative error {worst}");
}

#[test]
fn zero_lambda_returns_the_input_at_paper_settings() {
    let x = fixtures().remove(0);
    let cfg = EnhanceConfig {
        lambda: 0.0,
        ..Default::default()
    };
    let r = solve_map_latent(&x, &scorer(), denoiser(), &cfg).unwrap();
    assert_eq!(r.trace.len(), 40);
    assert!(r.x_star.max_abs_diff(&x) <= 1e-8);
    assert!(r.y_star.max_abs_diff(&x) <= 1e-8);
    assert!(r.trace.iter().all(|row| row.fidelity == FIDELITY_EPS));
}

#[test]
fn runs_are_bit_identical() {
    let x = fixtures().remove(1);
    let cfg = EnhanceConfig {
        max_iter: 5,
        ..stable(0.01)
    };
    let a = solve_map_latent(&x, &scorer(), denoiser(), &cfg).unwrap();
    let b = solve_map_latent(&x, &scorer(), denoiser(), &cfg).unwrap();
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.x_star, b.x_star);
    assert_eq!(a.y_star, b.y_star);
}

#[test]
fn well_conditioned_runs_lower_the_energy_and_raise_the_score() {
    let s = scorer();
    for x in fixtures() {
        let r = solve_map_latent(&x, &s, denoiser(), &stable(1.0)).unwrap();
        assert!(r.aborted.is_none());
        assert!(r.final_energy() < r.initial_energy(), "{} vs {}", r.final_energy(), r.initial_energy());
        let q0 = s.score(&x).unwrap();
        let q_pair = 0.5 * (s.score(&r.x_star).unwrap() + s.score(&r.y_star).unwrap());
        assert!(q_pair > q0, "{q_pair} vs {q0}");
    }
}

#[test]
fn huge_normalized_lambda_matches_latent_only_ascent() {
    let s = scorer();
    let x = fixtures().remove(2);
    let map = solve_map_latent(
        &x,
        &s,
        denoiser(),
        &EnhanceConfig {
            normalize: true,
            ..stable(1e6)
        },
    )
    .unwrap();
    let direct = maximize_latent(&x, &s, denoiser(), &stable(0.01)).unwrap();
    assert!(map.x_star.max_abs_diff(&direct.x_star) <= 1e-4, "{}", map.x_star.max_abs_diff(&direct.x_star));
    assert!(map.y_star.max_abs_diff(&direct.y_star) <= 1e-4);
}

#[test]
fn latent_only_ascent_strays_further_than_map() {
    let s = scorer();
    for x in fixtures().into_iter().take(3) {
        let map = solve_map_latent(&x, &s, denoiser(), &stable(1.0)).unwrap();
        let free = maximize_latent(&x, &s, denoiser(), &stable(1.0)).unwrap();
        let d_map = fidelity_d0(&map.x_star, &x, 4).unwrap();
        let d_free = fidelity_d0(&free.x_star, &x, 4).unwrap();
        assert!(d_free >= d_map, "{d_free} < {d_map}");
    }
}

#[test]
fn zero_iterations_of_latent_only_ascent_is_a_round_trip() {
    let x = fixtures().remove(3);
    let r = maximize_latent(&x, &scorer(), denoiser(), &EnhanceConfig { max_iter: 0, ..Default::default() }).unwrap();
    assert!(r.trace.is_empty());
    assert!(r.x_star.max_abs_diff(&x) <= 1e-8);
}

/// Fails once it has been asked for more than `limit` scores.
struct Flaky {
    calls: AtomicUsize,
    limit: usize,
}

impl QualityScorer for Flaky {
    fn id(&self) -> &str {
        "flaky"
    }
    fn range(&self) -> (f64, f64) {
        (0.0, 1.0)
    }
    fn score_grad(&self, x: &ImageGrid) -> dlmap_core::Result<(f64, ImageGrid)> {
        let n = self.calls.fetch_add(1, Ordering::SeqCst);
        let v = if n >= self.limit { f64::NAN } else { x.mean() };
        Ok((v, ImageGrid::full(1, x.height(), x.width(), 1.0 / x.len() as f64)))
    }
}

#[test]
fn non_finite_loss_aborts_with_the_last_finite_state() {
    let x = fixtures().remove(4);
    // two scores per iteration: the fourth iteration is the first bad one
    let flaky = Flaky {
        calls: AtomicUsize::new(0),
        limit: 6,
    };
    let r = solve_map_latent(&x, &flaky, denoiser(), &stable(0.01)).unwrap();
    let why = r.aborted.as_deref().unwrap();
    assert!(why.contains("iteration 3"), "{why}");
    assert_eq!(r.trace.len(), 3);
    assert!(r.x_star.is_finite() && r.final_terms.total.is_finite());
}

#[test]
fn zero_lambda_pixel_solve_is_exactly_the_input() {
    let x = fixtures().remove(0);
    let out = solve_map_pixel(&x, &scorer(), &PixelConfig { lambda: 0.0, ..Default::default() }).unwrap();
    assert_eq!(out, x);
}

#[test]
fn large_lambda_pixel_solve_follows_direct_ascent() {
    let s = NegTotalVariation::default();
    let x = fixtures().remove(1);
    let cfg = PixelConfig {
        lambda: 1e6,
        lr: 0.5,
        steps: 30,
        normalize: true,
    };
    let map = solve_map_pixel(&x, &s, &cfg).unwrap();
    let direct = maximize_direct(&x, &s, 30, 0.5).unwrap();
    assert!(map.max_abs_diff(&direct) <= 1e-4, "{}", map.max_abs_diff(&direct));
    // a moderate weight stays measurably closer to the input
    let moderate = solve_map_pixel(&x, &s, &PixelConfig { lambda: 1.0, normalize: true, ..cfg }).unwrap();
    assert!(mse(&moderate, &x) < mse(&direct, &x));
}

#[test]
fn pixel_trade_off_is_monotone_in_lambda() {
    let s = NegTotalVariation::default();
    for x in fixtures().into_iter().take(3) {
        let q0 = s.score(&x).unwrap();
        let mut prev: Option<(f64, f64)> = None;
        for lambda in [0.001, 0.003, 0.01, 0.03] {
            let out = solve_map_pixel(&x, &s, &PixelConfig { lambda, lr: 0.2, steps: 200, normalize: false }).unwrap();
            let (err, q) = (mse(&out, &x), s.score(&out).unwrap());
            // energy below the start bounds the distortion by the score gain
            assert!(err <= lambda * (q - q0) + 1e-12, "lambda {lambda}: {err} > {}", lambda * (q - q0));
            if let Some((pe, pq)) = prev {
                assert!(err >= pe && q >= pq, "lambda {lambda}: ({err}, {q}) vs ({pe}, {pq})");
            }
            prev = Some((err, q));
        }
    }
}

/// `-k |x - c|^2 / N`, maximised at `c`.
struct Quadratic {
    centre: ImageGrid,
    k: f64,
}

impl QualityScorer for Quadratic {
    fn id(&self) -> &str {
        "quadratic"
    }
    fn range(&self) -> (f64, f64) {
        (f64::NEG_INFINITY, 0.0)
    }
    fn score_grad(&self, x: &ImageGrid) -> dlmap_core::Result<(f64, ImageGrid)> {
        let d = x.sub(&self.centre);
        let n = x.len() as f64;
        Ok((-self.k * d.dot(&d) / n, d.scale(-2.0 * self.k / n)))
    }
}

#[test]
fn direct_ascent_finds_the_quadratic_maximiser() {
    let x = fixtures().remove(0);
    let q = Quadratic {
        centre: rand_grid(5, SIZE, SIZE, 0.5),
        k: (SIZE * SIZE) as f64 / 4.0,
    };
    assert_eq!(maximize_direct(&x, &q, 0, 0.5).unwrap(), x);
    let out = maximize_direct(&x, &q, 120, 0.5).unwrap();
    assert!(out.max_abs_diff(&q.centre) < 1e-10);
}

#[test]
fn direct_ascent_never_lowers_the_score() {
    let s = scorer();
    for x in fixtures() {
        let out = maximize_direct(&x, &s, 20, 0.5).unwrap();
        assert!(s.score(&out).unwrap() >= s.score(&x).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn fidelity_is_a_smoothed_metric(seed in 0u64..10_000, s in 1usize..5) {
        let a = rand_grid(seed, 12, 12, 1.0);
        let b = rand_grid(seed + 1, 12, 12, 1.0);
        let c = rand_grid(seed + 2, 12, 12, 1.0);
        let ab = fidelity_d0(&a, &b, s).unwrap();
        prop_assert!(ab >= FIDELITY_EPS);
        prop_assert!((ab - fidelity_d0(&b, &a, s).unwrap()).abs() < 1e-12);
        let ac = fidelity_d0(&a, &c, s).unwrap();
        let cb = fidelity_d0(&c, &b, s).unwrap();
        prop_assert!(ab <= ac + cb + 1e-9);
    }

    #[test]
    fn coarser_fidelity_never_exceeds_full_resolution(seed in 0u64..10_000) {
        // the antialiased downscale is an averaging operator
        let a = rand_grid(seed, 16, 16, 1.0);
        let b = rand_grid(seed + 7, 16, 16, 1.0);
        prop_assert!(fidelity_d0(&a, &b, 4).unwrap() <= fidelity_d0(&a, &b, 1).unwrap());
    }
}
