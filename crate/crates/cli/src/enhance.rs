use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dlmap_core::diffusion::{NoiseSchedule, ScheduleConfig};
use dlmap_core::quality::QualityScorer;
use dlmap_core::solver::{maximize_latent, mse, solve_map_latent, solve_map_pixel, write_trace_csv, EnhanceConfig, PixelConfig};
use dlmap_core::{Error, ImageGrid};
use serde::{Deserialize, Serialize};

use crate::models::{calibrate, load_denoiser, load_rated, load_scorer, scorer_inputs};
use crate::train::SCHEDULE;
use crate::Outcome;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Diffusion-latent MAP: fidelity plus the quality prior.
    #[default]
    Map,
    /// Quality maximisation in the latent alone, no fidelity term.
    LatentOnly,
    /// MAP by gradient steps on the pixels.
    Pixel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnhanceRun {
    pub image: PathBuf,
    pub scorer: String,
    pub mode: Mode,
    pub denoiser: Option<PathBuf>,
    /// CSV of `image,mos` rows to fit the scorer's logistic to.
    pub calibration: Option<PathBuf>,
    pub solver: EnhanceConfig,
    pub pixel: PixelConfig,
}

impl Default for EnhanceRun {
    fn default() -> Self {
        Self {
            image: PathBuf::new(),
            scorer: "sharpness".into(),
            mode: Mode::Map,
            denoiser: None,
            calibration: None,
            solver: EnhanceConfig::default(),
            pixel: PixelConfig::default(),
        }
    }
}

#[derive(Serialize)]
struct Summary {
    mode: Mode,
    scorer: String,
    score_initial: f64,
    score_final: f64,
    mse_to_input: f64,
    initial_energy: Option<f64>,
    final_energy: Option<f64>,
    divergence: Option<f64>,
    aborted: Option<String>,
}

/// A denoiser trained for another schedule would be queried at time steps
/// it never saw.
fn check_schedule(denoiser: &Path, solver: &EnhanceConfig) -> Result<()> {
    let path = denoiser.with_file_name(SCHEDULE);
    if !path.exists() {
        return Ok(());
    }
    let trained = ScheduleConfig::load(&path)?;
    if trained.steps != solver.steps || trained.alpha_floor != NoiseSchedule::DEFAULT_FLOOR {
        bail!(Error::Config(format!(
            "denoiser was trained with T={} (alpha floor {}), enhancement uses T={} (alpha floor {})",
            trained.steps,
            trained.alpha_floor,
            solver.steps,
            NoiseSchedule::DEFAULT_FLOOR
        )));
    }
    Ok(())
}

impl EnhanceRun {
    pub fn execute(&self, out: &Path) -> Result<Outcome> {
        let x = ImageGrid::load_png(&self.image).with_context(|| format!("cannot read image {}", self.image.display()))?;
        let mut inputs = vec![self.image.clone()];
        inputs.extend(scorer_inputs(&self.scorer));
        let rated = match &self.calibration {
            Some(p) => {
                inputs.push(p.clone());
                Some(load_rated(p)?)
            }
            None => None,
        };
        let scorer = calibrate(&load_scorer(&self.scorer)?, &x, rated.as_deref())?;
        let mut outputs: Vec<PathBuf> = vec!["x_star.png".into(), "summary.json".into()];
        let summary = match self.mode {
            Mode::Map | Mode::LatentOnly => {
                let Some(path) = &self.denoiser else {
                    bail!(Error::Config("latent modes need a trained denoiser (--denoiser)".into()));
                };
                inputs.push(path.clone());
                check_schedule(path, &self.solver)?;
                let denoiser = load_denoiser(path)?;
                let r = match self.mode {
                    Mode::Map => solve_map_latent(&x, &scorer, &denoiser, &self.solver)?,
                    _ => maximize_latent(&x, &scorer, &denoiser, &self.solver)?,
                };
                r.x_star.save_png(out.join("x_star.png"))?;
                r.y_star.save_png(out.join("y_star.png"))?;
                write_trace_csv(&r.trace, out.join("trace.csv"))?;
                outputs.extend(["y_star.png".into(), "trace.csv".into()]);
                Summary {
                    mode: self.mode,
                    scorer: scorer.id().to_string(),
                    score_initial: scorer.score(&x)?,
                    score_final: scorer.score(&r.x_star)?,
                    mse_to_input: mse(&r.x_star, &x),
                    initial_energy: Some(r.initial_energy()),
                    final_energy: Some(r.final_energy()),
                    divergence: Some(r.divergence),
                    aborted: r.aborted.clone(),
                }
            }
            Mode::Pixel => {
                let x_star = solve_map_pixel(&x, &scorer, &self.pixel)?;
                x_star.save_png(out.join("x_star.png"))?;
                Summary {
                    mode: self.mode,
                    scorer: scorer.id().to_string(),
                    score_initial: scorer.score(&x)?,
                    score_final: scorer.score(&x_star)?,
                    mse_to_input: mse(&x_star, &x),
                    initial_energy: None,
                    final_energy: None,
                    divergence: None,
                    aborted: None,
                }
            }
        };
        std::fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
        let energy = match (summary.initial_energy, summary.final_energy) {
            (Some(a), Some(b)) => format!(", energy {a:.6} -> {b:.6}"),
            _ => String::new(),
        };
        Ok(Outcome {
            inputs,
            outputs,
            summary: format!("score {:.4} -> {:.4}{energy}", summary.score_initial, summary.score_final),
            failure: summary.aborted.map(|why| format!("solver aborted: {why}; last finite state written")),
        })
    }
}
