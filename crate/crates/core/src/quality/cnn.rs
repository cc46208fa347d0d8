use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{ensure, Result};
use crate::grid::ImageGrid;
use crate::nn::{cosine_lr, AdamW, ConvEncoder, EncoderConfig, ParamLayout};
use crate::synth::rng;

use super::scorer::{check_input, crop_input, crop_input_backward, QualityScorer};

/// A convolutional regressor from image to scalar quality. Its pooled
/// features double as a semantic embedding.
#[derive(Clone, Debug)]
pub struct CnnScorer {
    encoder: ConvEncoder,
    params: Vec<f64>,
}

impl CnnScorer {
    pub const KIND: &'static str = "cnn-scorer";

    /// `config.embed_dim` is ignored: the head always has one output.
    pub fn new(config: EncoderConfig, seed: u64) -> Self {
        let config = EncoderConfig {
            channels: 2 * config.channels,
            embed_dim: 1,
            ..config
        };
        let mut layout = ParamLayout::new();
        let encoder = ConvEncoder::new(config, &mut layout);
        let mut params = vec![0.0; layout.len()];
        encoder.init(&mut params, &mut rng(seed));
        Self { encoder, params }
    }

    /// The configuration in image channels.
    pub fn config(&self) -> EncoderConfig {
        EncoderConfig {
            channels: self.encoder.config.channels / 2,
            ..self.encoder.config
        }
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    fn check(&self, x: &ImageGrid) -> Result<()> {
        check_input(x)?;
        ensure!(
            2 * x.channels() == self.encoder.config.channels,
            Contract,
            "image has {} channels, scorer expects {}",
            x.channels(),
            self.encoder.config.channels / 2
        );
        ensure!(
            x.height() % 4 == 0 && x.width() % 4 == 0,
            Contract,
            "image sides must be multiples of 4, got {}x{}",
            x.height(),
            x.width()
        );
        Ok(())
    }

    /// Pooled features ahead of the regression head.
    pub fn embedding(&self, x: &ImageGrid) -> Result<Vec<f64>> {
        self.check(x)?;
        Ok(self.encoder.features(&self.params, &crop_input(x).0))
    }

    pub fn embedding_dim(&self) -> usize {
        self.encoder.feature_dim()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(
            Self::KIND,
            serde_json::to_value(self.config()).expect("config serialises"),
            self.params.clone(),
        )
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config: EncoderConfig = ckpt.config_as(Self::KIND)?;
        let mut scorer = Self::new(config, 0);
        ensure!(
            ckpt.params.len() == scorer.params.len(),
            Format,
            "expected {} parameters, found {}",
            scorer.params.len(),
            ckpt.params.len()
        );
        scorer.params.copy_from_slice(&ckpt.params);
        Ok(scorer)
    }
}

impl QualityScorer for CnnScorer {
    fn id(&self) -> &str {
        Self::KIND
    }

    fn range(&self) -> (f64, f64) {
        (0.0, 1.0)
    }

    fn score(&self, x: &ImageGrid) -> Result<f64> {
        self.check(x)?;
        Ok(self.encoder.forward(&self.params, &crop_input(x).0).0[0])
    }

    fn score_grad(&self, x: &ImageGrid) -> Result<(f64, ImageGrid)> {
        self.check(x)?;
        let (input, z, s) = crop_input(x);
        let (out, cache) = self.encoder.forward(&self.params, &input);
        let g = self
            .encoder
            .backward(&self.params, &cache, &[1.0], None, true)
            .expect("input gradient requested");
        Ok((out[0], crop_input_backward(&z, s, &g)))
    }
}

/// An image with its regression target.
#[derive(Clone, Debug)]
pub struct ScorerSample {
    pub image: ImageGrid,
    pub target: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CnnTrainConfig {
    pub encoder: EncoderConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for CnnTrainConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            steps: 400,
            batch_size: 16,
            lr: 3e-3,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

/// Mean-squared-error regression onto the sample targets.
pub fn train_cnn_scorer(samples: &[ScorerSample], cfg: &CnnTrainConfig) -> Result<CnnScorer> {
    ensure!(!samples.is_empty(), Config, "training set is empty");
    ensure!(cfg.batch_size >= 1 && cfg.lr > 0.0, Config, "batch size and learning rate must be positive");
    let mut model = CnnScorer::new(cfg.encoder, cfg.seed);
    let inputs = samples
        .iter()
        .map(|s| {
            model.check(&s.image)?;
            Ok(crop_input(&s.image).0)
        })
        .collect::<Result<Vec<_>>>()?;
    let n = model.params.len();
    let mut opt = AdamW::new(n, cfg.weight_decay);
    let mut r = rng(cfg.seed ^ 0xc22);
    for step in 0..cfg.steps {
        let batch: Vec<usize> = (0..cfg.batch_size)
            .map(|_| r.random_range(0..samples.len()))
            .collect();
        let parts: Vec<Vec<f64>> = batch
            .par_iter()
            .map(|&i| {
                let s = &samples[i];
                let (out, cache) = model.encoder.forward(&model.params, &inputs[i]);
                let mut g = vec![0.0; n];
                let resid = 2.0 * (out[0] - s.target);
                model.encoder.backward(&model.params, &cache, &[resid], Some(&mut g), false);
                g
            })
            .collect();
        let k = 1.0 / cfg.batch_size as f64;
        let mut grads = vec![0.0; n];
        for g in parts {
            for (acc, v) in grads.iter_mut().zip(g) {
                *acc += v * k;
            }
        }
        opt.update(&mut model.params, &grads, cosine_lr(cfg.lr, step, cfg.steps, 0.05));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::synth::toy_dataset;

    #[test]
    fn input_gradient_matches_finite_differences() {
        let s = CnnScorer::new(EncoderConfig::default(), 2);
        let x = toy_dataset(1, 1, 8, 2).remove(0);
        let (_, g) = s.score_grad(&x).unwrap();
        let h = 1e-6;
        for i in (0..x.len()).step_by(3) {
            let mut up = x.clone();
            up.as_mut_slice()[i] += h;
            let mut dn = x.clone();
            dn.as_mut_slice()[i] -= h;
            let fd = (s.score(&up).unwrap() - s.score(&dn).unwrap()) / (2.0 * h);
            assert!((fd - g.as_slice()[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn sides_must_be_multiples_of_four() {
        let s = CnnScorer::new(EncoderConfig::default(), 2);
        assert!(matches!(s.score(&ImageGrid::zeros(1, 6, 8)), Err(Error::Contract(_))));
        assert!(matches!(s.score(&ImageGrid::zeros(3, 8, 8)), Err(Error::Contract(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let s = CnnScorer::new(EncoderConfig::default(), 5);
        let back = CnnScorer::from_checkpoint(&s.to_checkpoint()).unwrap();
        assert_eq!(back.params(), s.params());
        assert_eq!(back.embedding_dim(), 80);
        assert_eq!(back.config().channels, 1);
    }
}
