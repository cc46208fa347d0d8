use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dlmap_core::diffusion::{train_denoiser, Denoiser, DenoiserConfig, ScheduleConfig, TrainConfig};
use dlmap_core::{synth, Error, ImageGrid};
use serde::{Deserialize, Serialize};

use crate::{list_pngs, Outcome};

pub const CHECKPOINT: &str = "denoiser.ckpt";
pub const SCHEDULE: &str = "schedule.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory of equally sized PNGs; procedural toy images when unset.
    pub dir: Option<PathBuf>,
    pub images: usize,
    pub size: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: None,
            images: 64,
            size: 16,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRun {
    pub data: DataConfig,
    pub schedule: ScheduleConfig,
    pub denoiser: DenoiserConfig,
    pub train: TrainConfig,
    /// Seed of the initial weights.
    pub init_seed: u64,
}

impl TrainRun {
    pub fn execute(&self, out: &Path) -> Result<Outcome> {
        let channels = self.denoiser.channels;
        let (data, inputs) = match &self.data.dir {
            Some(dir) => {
                let files = list_pngs(dir)?;
                let images = files.iter().map(ImageGrid::load_png).collect::<Result<Vec<_>, _>>()?;
                (images, files)
            }
            None => (synth::toy_dataset(self.data.images, channels, self.data.size, self.data.seed), Vec::new()),
        };
        if data.is_empty() {
            bail!(Error::Config("no training images".into()));
        }
        if data[0].channels() != channels {
            bail!(Error::Config(format!(
                "training images have {} channels but the denoiser is configured for {channels}",
                data[0].channels()
            )));
        }
        let schedule = self.schedule.build()?;
        let init = Denoiser::new(self.denoiser, self.init_seed);
        let (denoiser, report) = train_denoiser(&data, &schedule, &self.train, init)?;
        for (step, loss) in &report.history {
            log::info!("step {step}: training loss {loss:.6}");
        }
        denoiser.to_checkpoint().save(out.join(CHECKPOINT))?;
        std::fs::write(out.join(SCHEDULE), toml::to_string(&self.schedule)?).context("cannot write schedule")?;
        std::fs::write(out.join("train_report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
        Ok(Outcome {
            inputs,
            outputs: vec![CHECKPOINT.into(), SCHEDULE.into(), "train_report.json".into()],
            summary: format!(
                "validation loss {:.6} -> {:.6} after {} steps",
                report.initial_validation_loss, report.final_validation_loss, self.train.steps
            ),
            failure: None,
        })
    }
}
