use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::choices::{ChoiceRecord, Side};
use crate::error::{ensure, Result};
use crate::grid::ImageGrid;
use crate::synth::rng;

/// A Case V observer: each image's perceived quality is its true quality
/// plus independent `N(0, sigma^2)` noise, and the higher one is chosen.
/// Returns `true` when the first image is chosen.
pub fn simulate_choice(q_first: f64, q_second: f64, sigma_obs: f64, rng: &mut impl Rng) -> Result<bool> {
    ensure!(sigma_obs > 0.0 && sigma_obs.is_finite(), Config, "observer noise must be > 0, got {sigma_obs}");
    let n1: f64 = StandardNormal.sample(rng);
    let n2: f64 = StandardNormal.sample(rng);
    Ok((q_first - q_second) + sigma_obs * (n1 - n2) > 0.0)
}

/// [`simulate_choice`] on two images judged by a true-quality oracle.
pub fn simulate_2afc(
    pair: (&ImageGrid, &ImageGrid),
    true_quality: &dyn Fn(&ImageGrid) -> Result<f64>,
    sigma_obs: f64,
    rng: &mut impl Rng,
) -> Result<bool> {
    simulate_choice(true_quality(pair.0)?, true_quality(pair.1)?, sigma_obs, rng)
}

/// A scheduled comparison with the true quality of both stimuli.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimPair {
    pub pair_id: String,
    pub model_a: String,
    pub model_b: String,
    pub quality_a: f64,
    pub quality_b: f64,
}

/// Every observer judges every pair once, sides randomised per trial.
/// Observer `o` draws from its own stream of `seed`, so the log does not
/// depend on thread scheduling. Timestamps are a synthetic one-second clock.
pub fn simulate_study(pairs: &[SimPair], observers: usize, sigma_obs: f64, seed: u64) -> Result<Vec<ChoiceRecord>> {
    ensure!(sigma_obs > 0.0 && sigma_obs.is_finite(), Config, "observer noise must be > 0, got {sigma_obs}");
    ensure!(observers > 0, Config, "need at least one observer");
    let per_observer = (0..observers)
        .into_par_iter()
        .map(|o| {
            let mut r = rng(seed);
            r.set_stream(o as u64 + 1);
            pairs
                .iter()
                .enumerate()
                .map(|(p, pair)| {
                    let a_left = r.random_bool(0.5);
                    let a_chosen = simulate_choice(pair.quality_a, pair.quality_b, sigma_obs, &mut r)?;
                    let (left, right) = if a_left {
                        (&pair.model_a, &pair.model_b)
                    } else {
                        (&pair.model_b, &pair.model_a)
                    };
                    let chosen_side = if a_chosen == a_left { Side::Left } else { Side::Right };
                    let trial_id = (o * pairs.len() + p) as u64;
                    Ok(ChoiceRecord {
                        trial_id,
                        pair_id: pair.pair_id.clone(),
                        left_model: left.clone(),
                        right_model: right.clone(),
                        chosen_side,
                        observer_id: format!("sim-{o:03}"),
                        timestamp: 1000 * trial_id,
                        session_id: String::new(),
                        response_ms: None,
                        excluded: false,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_observer.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn non_positive_noise_is_rejected() {
        assert!(simulate_choice(0.0, 1.0, 0.0, &mut rng(0)).is_err());
        assert!(simulate_study(&[], 1, -1.0, 0).is_err());
    }

    #[test]
    fn study_is_seeded_and_complete() {
        let pairs = vec![
            SimPair { pair_id: "p0".into(), model_a: "a".into(), model_b: "b".into(), quality_a: 1.0, quality_b: 0.0 },
            SimPair { pair_id: "p1".into(), model_a: "b".into(), model_b: "c".into(), quality_a: 0.0, quality_b: 0.5 },
        ];
        let a = simulate_study(&pairs, 3, 1.0, 9).unwrap();
        assert_eq!(a, simulate_study(&pairs, 3, 1.0, 9).unwrap());
        assert_ne!(a, simulate_study(&pairs, 3, 1.0, 10).unwrap());
        assert_eq!(a.len(), 6);
        assert_eq!(a.iter().map(|r| r.trial_id).collect::<Vec<_>>(), (0..6).collect::<Vec<_>>());
    }
}
