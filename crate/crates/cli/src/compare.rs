use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use dlmap_core::checkpoint::Checkpoint;
use dlmap_core::compare::{select_for_pair, EnhancerRecord, DEFAULT_GAMMA};
use dlmap_core::nn::EncoderConfig;
use dlmap_core::quality::CnnScorer;
use dlmap_core::solver::{EnhanceConfig, PixelConfig};
use dlmap_core::{Error, ImageGrid};
use dlmap_study::{StudySpec, Stimulus};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::models::{load_denoiser, scorer_inputs, EnhancerSpec};
use crate::{list_pngs, Outcome};

pub const PAIRS: &str = "pairs.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareRun {
    /// Directory of source PNGs; file stems are the image ids.
    pub pool: PathBuf,
    pub models: Vec<EnhancerSpec>,
    pub k: usize,
    pub gamma: f64,
    /// CNN checkpoint for the semantic embedding; an untrained network with
    /// `embedder_seed` otherwise.
    pub embedder: Option<PathBuf>,
    pub embedder_seed: u64,
    pub denoiser: Option<PathBuf>,
    pub solver: EnhanceConfig,
    pub pixel: PixelConfig,
}

impl Default for CompareRun {
    fn default() -> Self {
        Self {
            pool: PathBuf::new(),
            models: Vec::new(),
            k: 2,
            gamma: DEFAULT_GAMMA,
            embedder: None,
            embedder_seed: 0,
            denoiser: None,
            solver: EnhanceConfig::default(),
            pixel: PixelConfig::default(),
        }
    }
}

/// One scheduled comparison: two models' outputs on one source image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRow {
    pub pair_id: String,
    pub image_id: String,
    pub model_a: String,
    pub model_b: String,
    /// Relative to the run directory.
    pub path_a: PathBuf,
    pub path_b: PathBuf,
}

#[derive(Serialize)]
struct SelectionRow<'a> {
    model_a: &'a str,
    model_b: &'a str,
    rank: usize,
    image_id: &'a str,
    d1: f64,
    d2: f64,
    objective: f64,
}

pub fn read_pairs(path: &Path) -> Result<Vec<PairRow>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("cannot read pairs {}", path.display()))?;
    let rows = r.deserialize().collect::<Result<Vec<PairRow>, _>>()?;
    if rows.is_empty() {
        bail!(Error::Config(format!("{} lists no pairs", path.display())));
    }
    Ok(rows)
}

impl CompareRun {
    pub fn execute(&self, out: &Path) -> Result<Outcome> {
        let distinct: BTreeSet<String> = self.models.iter().map(|m| m.to_string()).collect();
        if self.models.len() < 2 || distinct.len() != self.models.len() {
            bail!(Error::Config("compare needs at least two distinct models".into()));
        }
        let files = list_pngs(&self.pool)?;
        let pool = files
            .iter()
            .map(|p| {
                let id = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
                Ok((id, ImageGrid::load_png(p)?))
            })
            .collect::<Result<Vec<_>>>()?;
        if self.k == 0 || self.k > pool.len() {
            bail!(Error::Config(format!("cannot select K={} images from a pool of {}", self.k, pool.len())));
        }
        let mut inputs = files.clone();
        let denoiser = match &self.denoiser {
            Some(p) => {
                inputs.push(p.clone());
                Some(Arc::new(load_denoiser(p)?))
            }
            None => None,
        };
        let records = self
            .models
            .iter()
            .map(|m| {
                inputs.extend(m.scorer().map(scorer_inputs).unwrap_or_default());
                m.build(denoiser.clone(), &self.solver, &self.pixel)
            })
            .collect::<Result<Vec<EnhancerRecord>>>()?;
        let embedder = match &self.embedder {
            Some(p) => {
                inputs.push(p.clone());
                CnnScorer::from_checkpoint(&Checkpoint::load(p)?)?
            }
            None => CnnScorer::new(
                EncoderConfig {
                    channels: pool[0].1.channels(),
                    ..EncoderConfig::default()
                },
                self.embedder_seed,
            ),
        };

        let model_pairs: Vec<(usize, usize)> =
            (0..records.len()).flat_map(|i| (i + 1..records.len()).map(move |j| (i, j))).collect();
        let mut selection = csv::Writer::from_path(out.join("selection.csv"))?;
        let mut pairs = Vec::new();
        let mut needed = BTreeSet::new();
        for &(i, j) in &model_pairs {
            let (a, b) = (&records[i], &records[j]);
            let chosen = select_for_pair(&pool, a, b, &embedder, self.k, self.gamma)?;
            log::info!("{} vs {}: {:?}", a.id(), b.id(), chosen.iter().map(|s| &s.id).collect::<Vec<_>>());
            for (rank, s) in chosen.iter().enumerate() {
                selection.serialize(SelectionRow {
                    model_a: a.id(),
                    model_b: b.id(),
                    rank,
                    image_id: &s.id,
                    d1: s.d1,
                    d2: s.d2,
                    objective: s.objective,
                })?;
                let path = |m: usize| PathBuf::from("outputs").join(self.models[m].slug()).join(format!("{}.png", s.id));
                needed.insert((i, s.id.clone()));
                needed.insert((j, s.id.clone()));
                pairs.push(PairRow {
                    pair_id: format!("{}:{}|{}", s.id, a.id(), b.id()),
                    image_id: s.id.clone(),
                    model_a: a.id().to_string(),
                    model_b: b.id().to_string(),
                    path_a: path(i),
                    path_b: path(j),
                });
            }
        }
        selection.flush()?;

        let mut outputs: Vec<PathBuf> = vec!["selection.csv".into(), PAIRS.into(), "study.json".into()];
        let written = needed
            .into_par_iter()
            .map(|(m, id)| {
                let x = &pool.iter().find(|(pid, _)| *pid == id).expect("selected ids come from the pool").1;
                let rel = PathBuf::from("outputs").join(self.models[m].slug()).join(format!("{id}.png"));
                std::fs::create_dir_all(out.join(&rel).parent().expect("has a parent"))?;
                records[m].output(&id, x)?.save_png(out.join(&rel))?;
                Ok(rel)
            })
            .collect::<Result<Vec<PathBuf>>>()?;
        outputs.extend(written);

        let mut w = csv::Writer::from_path(out.join(PAIRS))?;
        for p in &pairs {
            w.serialize(p)?;
        }
        w.flush()?;

        // every study image group holds exactly the two models of one pair;
        // paths stay relative to the run directory
        let stimuli = pairs
            .iter()
            .flat_map(|p| {
                [(&p.model_a, &p.path_a), (&p.model_b, &p.path_b)].map(|(m, path)| Stimulus {
                    image_id: p.pair_id.clone(),
                    model: m.clone(),
                    path: path.clone(),
                })
            })
            .collect();
        let study = StudySpec {
            name: format!("compare {}", self.models.iter().map(|m| m.to_string()).collect::<Vec<_>>().join(" ")),
            seed: self.embedder_seed,
            stimuli,
            training: Vec::new(),
            assignment: Default::default(),
            metadata: Default::default(),
        };
        std::fs::write(out.join("study.json"), serde_json::to_string_pretty(&study)? + "\n")?;
        Ok(Outcome {
            inputs,
            outputs,
            summary: format!("{} pairs over {} model pairs", pairs.len(), model_pairs.len()),
            failure: None,
        })
    }
}
