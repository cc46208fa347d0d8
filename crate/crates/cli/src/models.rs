use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use dlmap_core::checkpoint::Checkpoint;
use dlmap_core::compare::EnhancerRecord;
use dlmap_core::diffusion::Denoiser;
use dlmap_core::quality::{
    fit_logistic, load_calibration_csv, normalize_targets, Calibrated, CnnScorer, GradientSharpness, LogisticParams,
    MsLiqeModel, NegTotalVariation, QualityScorer,
};
use dlmap_core::solver::{maximize_latent, solve_map_latent, solve_map_pixel, EnhanceConfig, PixelConfig};
use dlmap_core::{synth, Error, ImageGrid};
use serde::{Deserialize, Serialize};

pub type Scorer = Arc<dyn QualityScorer>;

/// `sharpness`, `neg-tv`, `cnn:<checkpoint>` or `msliqe:<checkpoint>`.
pub fn load_scorer(id: &str) -> Result<Scorer> {
    let scorer: Scorer = match id.split_once(':') {
        None if id == "sharpness" => Arc::new(GradientSharpness),
        None if id == "neg-tv" => Arc::new(NegTotalVariation::default()),
        Some(("cnn", path)) => Arc::new(CnnScorer::from_checkpoint(&Checkpoint::load(path)?)?),
        Some(("msliqe", path)) => Arc::new(MsLiqeModel::from_checkpoint(&Checkpoint::load(path)?)?),
        _ => bail!(Error::Config(format!(
            "unknown scorer {id:?}; expected sharpness, neg-tv, cnn:<checkpoint> or msliqe:<checkpoint>"
        ))),
    };
    Ok(scorer)
}

/// Checkpoint files a scorer id refers to.
pub fn scorer_inputs(id: &str) -> Vec<std::path::PathBuf> {
    match id.split_once(':') {
        Some((_, path)) => vec![path.into()],
        None => Vec::new(),
    }
}

/// Logistic calibration: fitted to rated images when given, otherwise
/// centred on the scores of `x` and two blurred copies of it.
pub fn calibrate(raw: &Scorer, x: &ImageGrid, rated: Option<&[(ImageGrid, f64)]>) -> Result<Calibrated<Scorer>> {
    let params = match rated {
        Some(rows) => {
            let scores = rows.iter().map(|(img, _)| raw.score(img)).collect::<Result<Vec<_>, _>>()?;
            let mos: Vec<f64> = rows.iter().map(|(_, m)| *m).collect();
            fit_logistic(&scores, &normalize_targets(&mos)?)?
        }
        None => {
            let probes = [x.clone(), synth::gaussian_blur(x, 0.6), synth::gaussian_blur(x, 1.2)];
            let scores = probes.iter().map(|p| raw.score(p)).collect::<Result<Vec<_>, _>>()?;
            match LogisticParams::from_scores(&scores) {
                Ok(p) => p,
                // a flat image: blurring changes nothing
                Err(Error::DegenerateFit(_)) => LogisticParams::new(scores[0], 1.0)?,
                Err(e) => return Err(e.into()),
            }
        }
    };
    Ok(Calibrated::new(raw.clone(), params))
}

pub fn load_rated(path: &std::path::Path) -> Result<Vec<(ImageGrid, f64)>> {
    load_calibration_csv(path)?
        .into_iter()
        .map(|(p, mos)| Ok((ImageGrid::load_png(&p).with_context(|| format!("calibration image {}", p.display()))?, mos)))
        .collect()
}

pub fn load_denoiser(path: &std::path::Path) -> Result<Denoiser<f64>> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("cannot load denoiser {}", path.display()))?;
    Ok(Denoiser::from_checkpoint(&ckpt)?)
}

/// An enhancement model taking part in a comparison.
#[derive(Clone, Debug, PartialEq)]
pub enum EnhancerSpec {
    Identity,
    Blur(f64),
    /// `x + amount * (x - blur(x, 1))`
    Unsharp(f64),
    /// Diffusion-latent MAP with a scorer prior.
    Map(String),
    /// Latent-only quality maximisation.
    Latent(String),
    /// Pixel-space MAP.
    Pixel(String),
}

impl FromStr for EnhancerSpec {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        let number = |v: &str| -> Result<f64> {
            let x: f64 = v.parse().map_err(|_| anyhow!(Error::Config(format!("model {s:?}: {v:?} is not a number"))))?;
            if !(x.is_finite() && x >= 0.0) {
                bail!(Error::Config(format!("model {s:?}: parameter must be finite and >= 0")));
            }
            Ok(x)
        };
        Ok(match s.split_once(':') {
            None if s == "identity" => EnhancerSpec::Identity,
            Some(("blur", v)) => EnhancerSpec::Blur(number(v)?),
            Some(("unsharp", v)) => EnhancerSpec::Unsharp(number(v)?),
            Some(("map", v)) => EnhancerSpec::Map(v.to_string()),
            Some(("latent", v)) => EnhancerSpec::Latent(v.to_string()),
            Some(("pixel", v)) => EnhancerSpec::Pixel(v.to_string()),
            _ => bail!(Error::Config(format!(
                "unknown model {s:?}; expected identity, blur:<sigma>, unsharp:<amount>, map:<scorer>, latent:<scorer> or pixel:<scorer>"
            ))),
        })
    }
}

impl fmt::Display for EnhancerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EnhancerSpec::Identity => write!(f, "identity"),
            EnhancerSpec::Blur(s) => write!(f, "blur:{s}"),
            EnhancerSpec::Unsharp(a) => write!(f, "unsharp:{a}"),
            EnhancerSpec::Map(s) => write!(f, "map:{s}"),
            EnhancerSpec::Latent(s) => write!(f, "latent:{s}"),
            EnhancerSpec::Pixel(s) => write!(f, "pixel:{s}"),
        }
    }
}

impl Serialize for EnhancerSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for EnhancerSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

impl EnhancerSpec {
    pub fn scorer(&self) -> Option<&str> {
        match self {
            EnhancerSpec::Map(s) | EnhancerSpec::Latent(s) | EnhancerSpec::Pixel(s) => Some(s),
            _ => None,
        }
    }

    pub fn needs_denoiser(&self) -> bool {
        matches!(self, EnhancerSpec::Map(_) | EnhancerSpec::Latent(_))
    }

    /// File-system friendly form of the id.
    pub fn slug(&self) -> String {
        self.to_string().chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' }).collect()
    }

    pub fn build(&self, denoiser: Option<Arc<Denoiser<f64>>>, solver: &EnhanceConfig, pixel: &PixelConfig) -> Result<EnhancerRecord> {
        let id = self.to_string();
        let raw = self.scorer().map(load_scorer).transpose()?;
        let denoiser = match (self.needs_denoiser(), denoiser) {
            (true, None) => bail!(Error::Config(format!("model {id} needs a trained denoiser (--denoiser)"))),
            (_, d) => d,
        };
        let (solver, pixel) = (solver.clone(), pixel.clone());
        let record = match self.clone() {
            EnhancerSpec::Identity => EnhancerRecord::new(id, |x: &ImageGrid| Ok(x.clone())),
            EnhancerSpec::Blur(s) => EnhancerRecord::new(id, move |x: &ImageGrid| Ok(synth::gaussian_blur(x, s))),
            EnhancerSpec::Unsharp(a) => EnhancerRecord::new(id, move |x: &ImageGrid| {
                let detail = x.sub(&synth::gaussian_blur(x, 1.0));
                Ok(x.lin_comb(1.0, &detail, a).clamp(-1.0, 1.0))
            }),
            EnhancerSpec::Map(_) | EnhancerSpec::Latent(_) => {
                let (raw, d) = (raw.expect("scorer models have a scorer"), denoiser.expect("checked above"));
                let latent_only = matches!(self, EnhancerSpec::Latent(_));
                EnhancerRecord::new(id, move |x: &ImageGrid| {
                    let scorer = calibrate(&raw, x, None).map_err(core_error)?;
                    let r = match latent_only {
                        true => maximize_latent(x, &scorer, d.as_ref(), &solver)?,
                        false => solve_map_latent(x, &scorer, d.as_ref(), &solver)?,
                    };
                    Ok(r.x_star)
                })
            }
            EnhancerSpec::Pixel(_) => {
                let raw = raw.expect("scorer models have a scorer");
                EnhancerRecord::new(id, move |x: &ImageGrid| {
                    let scorer = calibrate(&raw, x, None).map_err(core_error)?;
                    solve_map_pixel(x, &scorer, &pixel)
                })
            }
        };
        Ok(record)
    }
}

fn core_error(e: anyhow::Error) -> Error {
    match e.downcast::<Error>() {
        Ok(e) => e,
        Err(e) => Error::Format(format!("{e:#}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_ids_round_trip() {
        for s in ["identity", "blur:0.6", "unsharp:1.5", "map:sharpness", "latent:neg-tv", "pixel:cnn:/x/y.ckpt"] {
            assert_eq!(s.parse::<EnhancerSpec>().unwrap().to_string(), s);
        }
        assert!("blur:-1".parse::<EnhancerSpec>().is_err());
        assert!("sharpen".parse::<EnhancerSpec>().is_err());
        assert_eq!("pixel:cnn:/x/y.ckpt".parse::<EnhancerSpec>().unwrap().slug(), "pixel_cnn__x_y.ckpt");
    }

    #[test]
    fn scorer_ids() {
        assert!(load_scorer("sharpness").is_ok());
        assert!(load_scorer("neg-tv").is_ok());
        assert!(load_scorer("lpips").is_err());
        assert!(load_scorer("cnn:/no/such/file").is_err());
    }

    #[test]
    fn default_calibration_maps_into_unit_interval() {
        let x = synth::toy_dataset(1, 1, 16, 0).remove(0);
        let c = calibrate(&load_scorer("sharpness").unwrap(), &x, None).unwrap();
        let q = c.score(&x).unwrap();
        assert!(q > 0.5 && q < 1.0);
        let flat = ImageGrid::zeros(1, 8, 8);
        assert!(calibrate(&load_scorer("neg-tv").unwrap(), &flat, None).is_ok());
    }
}
