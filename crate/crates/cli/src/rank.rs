use std::path::{Path, PathBuf};

use anyhow::Result;
use dlmap_core::compare::{
    aggregate_with_bootstrap, ranking_report, read_choices, significance_groups, ChoiceMatrix, DEFAULT_BOOTSTRAP,
    JOD_SIGMA,
};
use serde::{Deserialize, Serialize};

use crate::simulate::CHOICES;
use crate::Outcome;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RankRun {
    /// A choice log or the directory holding `choices.csv`.
    pub choices: PathBuf,
    pub sigma: f64,
    pub bootstrap: usize,
    pub seed: u64,
    /// Two-sided significance level of the grouping test.
    pub level: f64,
}

impl Default for RankRun {
    fn default() -> Self {
        Self {
            choices: PathBuf::new(),
            sigma: JOD_SIGMA,
            bootstrap: DEFAULT_BOOTSTRAP,
            seed: 0,
            level: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub models: Vec<String>,
    pub scores: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub groups: Vec<Vec<String>>,
}

impl Ranking {
    /// Model ids from best to worst.
    pub fn order(&self) -> Vec<String> {
        let mut idx: Vec<usize> = (0..self.models.len()).collect();
        idx.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]).then(a.cmp(&b)));
        idx.into_iter().map(|i| self.models[i].clone()).collect()
    }
}

impl RankRun {
    pub fn execute(&self, out: &Path) -> Result<Outcome> {
        let file = if self.choices.is_dir() { self.choices.join(CHOICES) } else { self.choices.clone() };
        let records = read_choices(&file)?;
        let matrix = ChoiceMatrix::from_records(&records, None)?;
        let result = aggregate_with_bootstrap(&matrix, self.sigma, self.bootstrap, self.seed)?;
        let groups = significance_groups(&result, self.level)?;
        let report = ranking_report(&result, &groups);
        matrix.save(out.join("matrix.csv"))?;
        std::fs::write(out.join("report.txt"), &report)?;
        let ranking = Ranking {
            models: result.models.clone(),
            scores: result.mu.clone(),
            std_errors: result.std_errors(),
            groups,
        };
        std::fs::write(out.join("ranking.json"), serde_json::to_string_pretty(&ranking)? + "\n")?;
        Ok(Outcome {
            inputs: vec![file],
            outputs: vec!["matrix.csv".into(), "report.txt".into(), "ranking.json".into()],
            summary: report.trim_end().to_string(),
            failure: None,
        })
    }
}
