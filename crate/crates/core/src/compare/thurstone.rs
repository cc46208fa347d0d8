use std::fmt::Write;

use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::choices::ChoiceMatrix;
use crate::error::{ensure, Error, Result};
use crate::num::{inv_mills, log_norm_cdf, norm_cdf};
use crate::synth::rng;

/// Discriminal dispersion that puts a one-unit score gap at 75% preference.
pub const JOD_SIGMA: f64 = 1.0484;

/// Resamples used for significance testing.
pub const DEFAULT_BOOTSTRAP: usize = 1000;

/// Fewest bootstrap samples [`significance_groups`] accepts.
pub const MIN_BOOTSTRAP: usize = 20;

/// Tiny quadratic penalty keeping the estimate finite when one model always
/// wins; its pull is negligible next to the likelihood of any real data.
const RIDGE: f64 = 1e-3;

/// Preference probability for a one-unit gap under `sigma`.
pub fn jod_anchor(sigma: f64) -> f64 {
    norm_cdf(1.0 / (std::f64::consts::SQRT_2 * sigma))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingResult {
    pub models: Vec<String>,
    /// Scale values, summing to zero.
    pub mu: Vec<f64>,
    pub sigma: f64,
    pub trials: u64,
    /// One estimate of `mu` per resample.
    pub bootstrap: Vec<Vec<f64>>,
}

impl RankingResult {
    /// Bootstrap standard error of each model's score.
    pub fn std_errors(&self) -> Vec<f64> {
        (0..self.mu.len())
            .map(|i| sample_std(self.bootstrap.iter().map(|b| b[i])))
            .collect()
    }

    pub fn score(&self, model: &str) -> Option<f64> {
        self.models.iter().position(|m| m == model).map(|i| self.mu[i])
    }
}

fn sample_std(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count();
    if n < 2 {
        return 0.0;
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    (values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
}

/// Negative log-likelihood plus ridge, with gradient and Hessian.
fn objective(counts: &[Vec<u64>], mu: &[f64], scale: f64) -> (f64, Vec<f64>, Vec<Vec<f64>>) {
    let n = mu.len();
    let mut f = 0.5 * RIDGE * mu.iter().map(|m| m * m).sum::<f64>();
    let mut g: Vec<f64> = mu.iter().map(|m| RIDGE * m).collect();
    let mut h = vec![vec![0.0; n]; n];
    for (i, row) in h.iter_mut().enumerate() {
        row[i] = RIDGE;
    }
    for i in 0..n {
        for j in 0..n {
            let w = counts[i][j] as f64;
            if i == j || w == 0.0 {
                continue;
            }
            let z = (mu[i] - mu[j]) / scale;
            let m = inv_mills(z);
            f -= w * log_norm_cdf(z);
            g[i] -= w * m / scale;
            g[j] += w * m / scale;
            let curv = w * m * (z + m) / (scale * scale);
            h[i][i] += curv;
            h[j][j] += curv;
            h[i][j] -= curv;
            h[j][i] -= curv;
        }
    }
    (f, g, h)
}

/// Solve `a x = b` for symmetric positive definite `a`.
fn cholesky_solve(a: &[Vec<f64>], b: &[f64]) -> Option<Vec<f64>> {
    let n = b.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = a[i][j] - (0..j).map(|k| l[i][k] * l[j][k]).sum::<f64>();
            if i == j {
                if s <= 0.0 {
                    return None;
                }
                l[i][i] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        y[i] = (b[i] - (0..i).map(|k| l[i][k] * y[k]).sum::<f64>()) / l[i][i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        x[i] = (y[i] - (i + 1..n).map(|k| l[k][i] * x[k]).sum::<f64>()) / l[i][i];
    }
    Some(x)
}

/// Damped Newton on the (strictly convex) penalised negative log-likelihood.
fn fit(counts: &[Vec<u64>], sigma: f64) -> Result<Vec<f64>> {
    let n = counts.len();
    let scale = std::f64::consts::SQRT_2 * sigma;
    let mut mu = vec![0.0; n];
    let (mut f, mut g, mut h) = objective(counts, &mu, scale);
    for _ in 0..200 {
        if g.iter().all(|v| v.abs() < 1e-11) {
            break;
        }
        let neg: Vec<f64> = g.iter().map(|v| -v).collect();
        let step = cholesky_solve(&h, &neg).ok_or_else(|| Error::DegenerateFit("Thurstone Hessian is not positive definite".into()))?;
        let slope: f64 = step.iter().zip(&g).map(|(s, g)| s * g).sum();
        let mut t = 1.0;
        loop {
            let cand: Vec<f64> = mu.iter().zip(&step).map(|(m, s)| m + t * s).collect();
            let (fc, gc, hc) = objective(counts, &cand, scale);
            if fc <= f + 1e-4 * t * slope || t < 1e-10 {
                mu = cand;
                f = fc;
                g = gc;
                h = hc;
                break;
            }
            t *= 0.5;
        }
        if t < 1e-10 {
            break;
        }
    }
    ensure!(mu.iter().all(|m| m.is_finite()), DegenerateFit, "Thurstone fit diverged");
    let mean = mu.iter().sum::<f64>() / n as f64;
    Ok(mu.iter().map(|m| m - mean).collect())
}

fn check_connected(c: &ChoiceMatrix) -> Result<()> {
    let components = c.components();
    if components.len() > 1 {
        return Err(Error::Disconnected(components));
    }
    Ok(())
}

/// Case V maximum-likelihood scale values without resampling.
pub fn aggregate_thurstone(c: &ChoiceMatrix, sigma: f64) -> Result<RankingResult> {
    ensure!(sigma > 0.0 && sigma.is_finite(), Config, "sigma must be > 0, got {sigma}");
    check_connected(c)?;
    Ok(RankingResult {
        models: c.models().to_vec(),
        mu: fit(c.counts(), sigma)?,
        sigma,
        trials: c.total_trials(),
        bootstrap: Vec::new(),
    })
}

/// [`aggregate_thurstone`] plus a nonparametric bootstrap over trials: each
/// compared pair keeps its trial count and redraws its outcomes from the
/// observed preference rate.
pub fn aggregate_with_bootstrap(c: &ChoiceMatrix, sigma: f64, resamples: usize, seed: u64) -> Result<RankingResult> {
    let mut result = aggregate_thurstone(c, sigma)?;
    let n = c.len();
    result.bootstrap = (0..resamples)
        .into_par_iter()
        .map(|b| {
            let mut r = rng(seed);
            r.set_stream(b as u64 + 1);
            let mut counts = vec![vec![0u64; n]; n];
            for i in 0..n {
                for j in i + 1..n {
                    let total = c.trials(i, j);
                    if total == 0 {
                        continue;
                    }
                    let p = c.wins(i, j) as f64 / total as f64;
                    let k = Binomial::new(total, p).map_err(|e| Error::Contract(e.to_string()))?.sample(&mut r);
                    counts[i][j] = k;
                    counts[j][i] = total - k;
                }
            }
            fit(&counts, sigma)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(result)
}

/// Two-tailed t-tests between every pair of models on their bootstrap
/// score differences; pairs not separated at `level` are merged and the
/// groups closed transitively. Groups are listed best first.
pub fn significance_groups(result: &RankingResult, level: f64) -> Result<Vec<Vec<String>>> {
    ensure!(level > 0.0 && level < 1.0, Config, "significance level must lie in (0, 1), got {level}");
    let n = result.mu.len();
    if n > 1 {
        ensure!(
            result.bootstrap.len() >= MIN_BOOTSTRAP,
            Config,
            "significance testing needs at least {MIN_BOOTSTRAP} bootstrap samples, got {}",
            result.bootstrap.len()
        );
    }
    let df = result.bootstrap.len().saturating_sub(1).max(1) as f64;
    let t_dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Config(e.to_string()))?;
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], i: usize) -> usize {
        if p[i] != i {
            let r = find(p, p[i]);
            p[i] = r;
        }
        p[i]
    }
    for i in 0..n {
        for j in i + 1..n {
            let diff = result.mu[i] - result.mu[j];
            let se = sample_std(result.bootstrap.iter().map(|b| b[i] - b[j]));
            let same = if se > 0.0 {
                let t = diff / se;
                2.0 * (1.0 - t_dist.cdf(t.abs())) >= level
            } else {
                diff.abs() < 1e-12
            };
            if same {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| result.mu[b].total_cmp(&result.mu[a]).then(a.cmp(&b)));
    let mut groups: Vec<(usize, Vec<String>)> = Vec::new();
    for i in order {
        let root = find(&mut parent, i);
        match groups.iter_mut().find(|(r, _)| *r == root) {
            Some((_, g)) => g.push(result.models[i].clone()),
            None => groups.push((root, vec![result.models[i].clone()])),
        }
    }
    Ok(groups.into_iter().map(|(_, g)| g).collect())
}

fn group_label(k: usize) -> String {
    let mut k = k;
    let mut s = String::new();
    loop {
        s.insert(0, (b'A' + (k % 26) as u8) as char);
        if k < 26 {
            break;
        }
        k = k / 26 - 1;
    }
    s
}

/// Plain-text ranking table, best model first, with group letters and a
/// closing line per group.
pub fn ranking_report(result: &RankingResult, groups: &[Vec<String>]) -> String {
    let se = result.std_errors();
    let mut order: Vec<usize> = (0..result.mu.len()).collect();
    order.sort_by(|&a, &b| result.mu[b].total_cmp(&result.mu[a]).then(a.cmp(&b)));
    let label_of = |m: &str| {
        groups
            .iter()
            .position(|g| g.iter().any(|x| x == m))
            .map_or("-".to_string(), group_label)
    };
    let mut out = String::new();
    let _ = writeln!(out, "# sigma={} trials={} bootstrap={}", result.sigma, result.trials, result.bootstrap.len());
    let _ = writeln!(out, "rank\tmodel\tscore\tstd_error\tgroup");
    for (rank, &i) in order.iter().enumerate() {
        let m = &result.models[i];
        let _ = writeln!(out, "{}\t{}\t{:.4}\t{:.4}\t{}", rank + 1, m, result.mu[i], se[i], label_of(m));
    }
    for (k, g) in groups.iter().enumerate() {
        let _ = writeln!(out, "group {}: {}", group_label(k), g.join(" "));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two(c12: u64, c21: u64) -> ChoiceMatrix {
        ChoiceMatrix::new(vec!["a".into(), "b".into()], vec![vec![0, c12], vec![c21, 0]]).unwrap()
    }

    #[test]
    fn cholesky_solves_a_small_system() {
        let a = vec![vec![4.0, 2.0], vec![2.0, 3.0]];
        let x = cholesky_solve(&a, &[2.0, 1.0]).unwrap();
        assert!((4.0 * x[0] + 2.0 * x[1] - 2.0).abs() < 1e-12);
        assert!((2.0 * x[0] + 3.0 * x[1] - 1.0).abs() < 1e-12);
        assert!(cholesky_solve(&[vec![0.0]], &[1.0]).is_none());
    }

    #[test]
    fn one_sided_data_stays_finite() {
        let r = aggregate_thurstone(&two(20, 0), JOD_SIGMA).unwrap();
        assert!(r.mu[0] > 1.0 && r.mu[0].is_finite());
    }

    #[test]
    fn group_labels() {
        assert_eq!(group_label(0), "A");
        assert_eq!(group_label(25), "Z");
        assert_eq!(group_label(26), "AA");
    }

    #[test]
    fn too_few_resamples_is_a_configuration_error() {
        let r = aggregate_with_bootstrap(&two(6, 4), JOD_SIGMA, 5, 0).unwrap();
        assert!(matches!(significance_groups(&r, 0.05), Err(Error::Config(_))));
    }

    #[test]
    fn report_lists_models_best_first() {
        let r = aggregate_with_bootstrap(&two(30, 10), JOD_SIGMA, 50, 0).unwrap();
        let groups = significance_groups(&r, 0.05).unwrap();
        let text = ranking_report(&r, &groups);
        let rows: Vec<&str> = text.lines().skip(2).take(2).collect();
        assert!(rows[0].starts_with("1\ta\t"), "{text}");
        assert!(rows[1].starts_with("2\tb\t"));
    }
}
