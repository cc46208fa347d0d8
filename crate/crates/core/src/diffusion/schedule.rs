use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Structured-text schedule description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    /// Number of diffusion steps `T`.
    pub steps: usize,
    /// Value `alpha_T` is clamped to.
    pub alpha_floor: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 20,
            alpha_floor: NoiseSchedule::DEFAULT_FLOOR,
        }
    }
}

impl ScheduleConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.alpha_floor)
    }
}

/// Cumulative signal levels `alpha_0 = 1 >= alpha_1 >= ... >= alpha_T > 0`
/// together with the DDIM step coefficients
/// `a_t = sqrt(alpha_{t-1} / alpha_t)` and
/// `b_t = sqrt(1 - alpha_{t-1}) - sqrt(alpha_{t-1} (1 - alpha_t) / alpha_t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    alphas: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
}

impl NoiseSchedule {
    pub const DEFAULT_FLOOR: f64 = 1e-4;

    /// Linear in the noise variance: `1 - alpha_t = (t / T) (1 - floor)`.
    pub fn linear(steps: usize, floor: f64) -> Result<Self> {
        ensure!(steps >= 1, Config, "schedule needs at least one step");
        ensure!(
            floor > 0.0 && floor < 1.0,
            Config,
            "alpha floor must lie in (0, 1), got {floor}"
        );
        let alphas = (0..=steps)
            .map(|t| 1.0 - (t as f64 / steps as f64) * (1.0 - floor))
            .collect();
        Self::from_alphas(alphas)
    }

    /// Arbitrary non-increasing schedule starting at one. Equal neighbours
    /// are accepted; they make the corresponding DDIM step the identity.
    pub fn from_alphas(alphas: Vec<f64>) -> Result<Self> {
        ensure!(alphas.len() >= 2, Config, "schedule needs alpha_0 and alpha_T");
        ensure!(alphas[0] == 1.0, Config, "alpha_0 must be 1, got {}", alphas[0]);
        for w in alphas.windows(2) {
            ensure!(
                w[1] <= w[0],
                Config,
                "alphas must be non-increasing ({} then {})",
                w[0],
                w[1]
            );
        }
        let last = *alphas.last().unwrap();
        ensure!(
            last > 0.0 && last.is_finite(),
            Config,
            "alpha_T must be positive (clamp it to a floor), got {last}"
        );
        let mut a = vec![1.0; alphas.len()];
        let mut b = vec![0.0; alphas.len()];
        for t in 1..alphas.len() {
            let (prev, cur) = (alphas[t - 1], alphas[t]);
            a[t] = (prev / cur).sqrt();
            b[t] = -(prev * (1.0 - cur) / cur).sqrt() + (1.0 - prev).sqrt();
        }
        Ok(Self { alphas, a, b })
    }

    /// `T`
    pub fn steps(&self) -> usize {
        self.alphas.len() - 1
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    /// `(a_t, b_t)` for `1 <= t <= T`.
    pub fn coefficients(&self, t: usize) -> Result<(f64, f64)> {
        ensure!(
            (1..=self.steps()).contains(&t),
            Contract,
            "step {t} outside 1..={}",
            self.steps()
        );
        Ok((self.a[t], self.b[t]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_schedule_invariants() {
        let s = NoiseSchedule::linear(20, 1e-4).unwrap();
        assert_eq!(s.steps(), 20);
        assert_eq!(s.alpha(0), 1.0);
        assert!((s.alpha(20) - 1e-4).abs() < 1e-15);
        for t in 1..=20 {
            assert!(s.alpha(t) < s.alpha(t - 1));
            let (a, _) = s.coefficients(t).unwrap();
            assert!(a >= 1.0);
        }
    }

    #[test]
    fn closed_form_coefficients() {
        let s = NoiseSchedule::from_alphas(vec![1.0, 0.25]).unwrap();
        let (a, b) = s.coefficients(1).unwrap();
        assert!((a - 2.0).abs() < 1e-15);
        assert!((b + 3f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_schedules() {
        assert!(matches!(NoiseSchedule::from_alphas(vec![1.0, 0.0]), Err(Error::Config(_))));
        assert!(matches!(NoiseSchedule::from_alphas(vec![0.9, 0.5]), Err(Error::Config(_))));
        assert!(matches!(NoiseSchedule::from_alphas(vec![1.0, 0.5, 0.6]), Err(Error::Config(_))));
        assert!(matches!(NoiseSchedule::linear(0, 1e-4), Err(Error::Config(_))));
        let s = NoiseSchedule::linear(4, 1e-4).unwrap();
        assert!(matches!(s.coefficients(0), Err(Error::Contract(_))));
        assert!(matches!(s.coefficients(5), Err(Error::Contract(_))));
    }

    #[test]
    fn config_parses_from_toml() {
        let cfg: ScheduleConfig = toml::from_str("steps = 8\nalpha_floor = 0.001\n").unwrap();
        assert_eq!(cfg.steps, 8);
        let s = cfg.build().unwrap();
        assert!((s.alpha(8) - 0.001).abs() < 1e-15);
    }
}
