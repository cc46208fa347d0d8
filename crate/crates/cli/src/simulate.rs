use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use dlmap_core::compare::{simulate_study, write_choices, SimPair, JOD_SIGMA};
use dlmap_core::quality::QualityScorer;
use dlmap_core::{Error, ImageGrid};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compare::{read_pairs, PAIRS};
use crate::models::{load_scorer, scorer_inputs};
use crate::Outcome;

pub const CHOICES: &str = "choices.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateRun {
    /// A `pairs.csv` or the compare run directory holding one.
    pub pairs: PathBuf,
    pub observers: usize,
    pub sigma: f64,
    pub seed: u64,
    /// Scorer giving each stimulus its true quality.
    pub quality: String,
    /// Per-model true qualities; replaces the scorer when set.
    pub planted: Option<BTreeMap<String, f64>>,
}

impl Default for SimulateRun {
    fn default() -> Self {
        Self {
            pairs: PathBuf::new(),
            observers: 25,
            sigma: JOD_SIGMA,
            seed: 0,
            quality: "sharpness".into(),
            planted: None,
        }
    }
}

impl SimulateRun {
    pub fn execute(&self, out: &Path) -> Result<Outcome> {
        let file = if self.pairs.is_dir() { self.pairs.join(PAIRS) } else { self.pairs.clone() };
        let base = file.parent().unwrap_or(Path::new("")).to_path_buf();
        let rows = read_pairs(&file)?;
        let mut inputs = vec![file.clone()];
        let qualities: Vec<(f64, f64)> = match &self.planted {
            Some(planted) => rows
                .iter()
                .map(|r| {
                    let q = |m: &str| {
                        planted
                            .get(m)
                            .copied()
                            .ok_or_else(|| Error::Config(format!("no planted quality for model {m}")))
                    };
                    Ok((q(&r.model_a)?, q(&r.model_b)?))
                })
                .collect::<Result<_>>()?,
            None => {
                inputs.extend(scorer_inputs(&self.quality));
                for r in &rows {
                    inputs.extend([base.join(&r.path_a), base.join(&r.path_b)]);
                }
                let scorer = load_scorer(&self.quality)?;
                rows.par_iter()
                    .map(|r| {
                        let q = |p: &Path| -> Result<f64> { Ok(scorer.score(&ImageGrid::load_png(base.join(p))?)?) };
                        Ok((q(&r.path_a)?, q(&r.path_b)?))
                    })
                    .collect::<Result<_>>()?
            }
        };
        if self.observers == 0 {
            bail!(Error::Config("need at least one observer".into()));
        }
        let pairs: Vec<SimPair> = rows
            .iter()
            .zip(qualities)
            .map(|(r, (qa, qb))| SimPair {
                pair_id: r.pair_id.clone(),
                model_a: r.model_a.clone(),
                model_b: r.model_b.clone(),
                quality_a: qa,
                quality_b: qb,
            })
            .collect();
        let log = simulate_study(&pairs, self.observers, self.sigma, self.seed)?;
        write_choices(out.join(CHOICES), &log)?;
        Ok(Outcome {
            inputs,
            outputs: vec![CHOICES.into()],
            summary: format!("{} choices from {} observers over {} pairs", log.len(), self.observers, pairs.len()),
            failure: None,
        })
    }
}
