use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// `q' = (xi1 - xi2) / (1 + exp(-(q - xi3) / |xi4|)) + xi2` with the bounds
/// pinned to `xi1 = 1`, `xi2 = 0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticParams {
    pub xi1: f64,
    pub xi2: f64,
    pub xi3: f64,
    pub xi4: f64,
}

impl LogisticParams {
    pub fn new(xi3: f64, xi4: f64) -> Result<Self> {
        let p = Self {
            xi1: 1.0,
            xi2: 0.0,
            xi3,
            xi4,
        };
        p.validate()?;
        Ok(p)
    }

    /// Centre on the score mean with the score spread as slope; the
    /// fallback when no human ratings are available.
    pub fn from_scores(scores: &[f64]) -> Result<Self> {
        ensure!(scores.len() >= 2, DegenerateFit, "need at least two scores");
        let n = scores.len() as f64;
        let mean = scores.iter().sum::<f64>() / n;
        let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
        ensure!(var > 0.0, DegenerateFit, "all scores are identical");
        Self::new(mean, var.sqrt())
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.xi4 != 0.0 && self.xi4.is_finite(),
            Config,
            "logistic slope xi4 must be non-zero and finite"
        );
        ensure!(
            self.xi1.is_finite() && self.xi2.is_finite() && self.xi3.is_finite(),
            Config,
            "logistic parameters must be finite"
        );
        Ok(())
    }

    pub fn lower(&self) -> f64 {
        self.xi1.min(self.xi2)
    }

    pub fn upper(&self) -> f64 {
        self.xi1.max(self.xi2)
    }

    fn sigmoid(&self, q: f64) -> f64 {
        let z = (q - self.xi3) / self.xi4.abs();
        if z >= 0.0 {
            1.0 / (1.0 + (-z).exp())
        } else {
            let e = z.exp();
            e / (1.0 + e)
        }
    }

    pub fn apply(&self, q: f64) -> f64 {
        (self.xi1 - self.xi2) * self.sigmoid(q) + self.xi2
    }

    /// Value and derivative with respect to `q`.
    pub fn value_and_slope(&self, q: f64) -> (f64, f64) {
        let s = self.sigmoid(q);
        let k = self.xi1 - self.xi2;
        (k * s + self.xi2, k * s * (1.0 - s) / self.xi4.abs())
    }
}

pub fn apply_logistic(q: f64, params: &LogisticParams) -> Result<f64> {
    params.validate()?;
    Ok(params.apply(q))
}

/// Rescale ratings linearly onto `[0, 1]`.
pub fn normalize_targets(mos: &[f64]) -> Result<Vec<f64>> {
    let lo = mos.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = mos.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    ensure!(hi > lo, DegenerateFit, "ratings must not all be equal");
    Ok(mos.iter().map(|m| (m - lo) / (hi - lo)).collect())
}

fn logit(t: f64) -> f64 {
    (t / (1.0 - t)).ln()
}

fn sum_sq(p: &LogisticParams, scores: &[f64], targets: &[f64]) -> f64 {
    scores
        .iter()
        .zip(targets)
        .map(|(&s, &t)| (p.apply(s) - t).powi(2))
        .sum()
}

/// Least-squares fit of `xi3`, `xi4` (bounds pinned) by Levenberg-Marquardt,
/// started from the score mean and spread. Two points with targets strictly
/// inside `(0, 1)` are interpolated exactly.
pub fn fit_logistic(scores: &[f64], targets: &[f64]) -> Result<LogisticParams> {
    ensure!(
        scores.len() == targets.len(),
        Contract,
        "{} scores but {} targets",
        scores.len(),
        targets.len()
    );
    ensure!(
        scores.iter().chain(targets).all(|v| v.is_finite()),
        Contract,
        "scores and targets must be finite"
    );
    let start = LogisticParams::from_scores(scores)?;

    if scores.len() == 2 && targets.iter().all(|&t| t > 0.0 && t < 1.0) && targets[0] != targets[1] {
        let slope = (scores[0] - scores[1]) / (logit(targets[0]) - logit(targets[1]));
        if slope > 0.0 {
            return LogisticParams::new(scores[0] - slope * logit(targets[0]), slope);
        }
    }

    // optimise over (xi3, ln xi4) so the slope stays positive
    let mut c = start.xi3;
    let mut lw = start.xi4.ln();
    let mut mu = 1e-3;
    let mut cost = sum_sq(&start, scores, targets);
    for _ in 0..500 {
        let p = LogisticParams::new(c, lw.exp())?;
        let (mut jtj, mut jtr) = ([[0.0; 2]; 2], [0.0; 2]);
        for (&s, &t) in scores.iter().zip(targets) {
            let (v, dq) = p.value_and_slope(s);
            // d/dc = -dq, d/dlw = -dq * (s - c)
            let j = [-dq, -dq * (s - c)];
            let r = v - t;
            for a in 0..2 {
                jtr[a] += j[a] * r;
                for b in 0..2 {
                    jtj[a][b] += j[a] * j[b];
                }
            }
        }
        let mut improved = false;
        while mu < 1e12 {
            let m = [
                [jtj[0][0] * (1.0 + mu) + 1e-300, jtj[0][1]],
                [jtj[1][0], jtj[1][1] * (1.0 + mu) + 1e-300],
            ];
            let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
            if det == 0.0 || !det.is_finite() {
                mu *= 10.0;
                continue;
            }
            let dc = -(m[1][1] * jtr[0] - m[0][1] * jtr[1]) / det;
            let dl = -(m[0][0] * jtr[1] - m[1][0] * jtr[0]) / det;
            let trial = LogisticParams::new(c + dc, (lw + dl).exp());
            let trial_cost = trial.map(|t| sum_sq(&t, scores, targets)).unwrap_or(f64::INFINITY);
            if trial_cost < cost {
                let converged = (cost - trial_cost) <= 1e-15 * cost.max(1e-300);
                c += dc;
                lw += dl;
                cost = trial_cost;
                mu = (mu * 0.3).max(1e-12);
                improved = !converged;
                break;
            }
            mu *= 10.0;
        }
        if !improved {
            break;
        }
    }
    LogisticParams::new(c, lw.exp())
}

/// Read `(image, mos)` rows; relative image paths resolve against the CSV's
/// directory.
pub fn load_calibration_csv(path: impl AsRef<Path>) -> Result<Vec<(PathBuf, f64)>> {
    #[derive(Deserialize)]
    struct Row {
        image: PathBuf,
        mos: f64,
    }
    let path = path.as_ref();
    let dir = path.parent().unwrap_or(Path::new(""));
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => Error::NotFound(path.display().to_string()),
        _ => Error::Csv(e),
    })?;
    let mut rows = Vec::new();
    for row in reader.deserialize() {
        let row: Row = row?;
        ensure!(row.mos.is_finite(), Format, "non-finite rating for {}", row.image.display());
        rows.push((dir.join(row.image), row.mos));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn midpoint_maps_to_half() {
        let p = LogisticParams::new(0.0, 1.0).unwrap();
        assert_eq!(apply_logistic(0.0, &p).unwrap(), 0.5);
        // the slope sign is irrelevant
        let n = LogisticParams { xi4: -1.0, ..p };
        assert_eq!(apply_logistic(2.0, &n).unwrap(), apply_logistic(2.0, &p).unwrap());
    }

    #[test]
    fn zero_slope_is_a_config_error() {
        assert!(matches!(LogisticParams::new(0.0, 0.0), Err(Error::Config(_))));
        let bad = LogisticParams {
            xi1: 1.0,
            xi2: 0.0,
            xi3: 0.0,
            xi4: 0.0,
        };
        assert!(matches!(apply_logistic(0.3, &bad), Err(Error::Config(_))));
    }

    #[test]
    fn two_points_are_interpolated_exactly() {
        let p = fit_logistic(&[0.0, 1.0], &[0.25, 0.75]).unwrap();
        assert_abs_diff_eq!(p.apply(0.0), 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(p.apply(1.0), 0.75, epsilon = 1e-12);
    }

    #[test]
    fn recovers_generating_parameters() {
        let truth = LogisticParams::new(0.3, 0.2).unwrap();
        let scores: Vec<f64> = (0..40).map(|i| -0.5 + i as f64 * 0.04).collect();
        let targets: Vec<f64> = scores.iter().map(|&s| truth.apply(s)).collect();
        let fit = fit_logistic(&scores, &targets).unwrap();
        assert_abs_diff_eq!(fit.xi3, 0.3, epsilon = 1e-6);
        assert_abs_diff_eq!(fit.xi4, 0.2, epsilon = 1e-6);
    }

    #[test]
    fn identical_scores_are_degenerate() {
        assert!(matches!(fit_logistic(&[1.0; 5], &[0.1, 0.2, 0.3, 0.4, 0.5]), Err(Error::DegenerateFit(_))));
        assert!(matches!(LogisticParams::from_scores(&[2.0, 2.0]), Err(Error::DegenerateFit(_))));
    }

    #[test]
    fn fallback_uses_mean_and_spread() {
        let p = LogisticParams::from_scores(&[1.0, 3.0]).unwrap();
        assert_eq!((p.xi3, p.xi4), (2.0, 1.0));
    }
}
