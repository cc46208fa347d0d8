use std::collections::BTreeMap;
use std::path::PathBuf;

use dlmap_core::synth::rng;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ServiceError, ServiceResult};

/// One enhanced image: the output of `model` on source image `image_id`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stimulus {
    pub image_id: String,
    pub model: String,
    pub path: PathBuf,
}

/// Which scored pairs each observer sees.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Assignment {
    /// Every observer judges every pair.
    #[default]
    All,
    /// Pairs are dealt round-robin into `groups` disjoint blocks and observer
    /// `n` (in order of first session) gets block `n % groups`.
    Split { groups: usize },
}

/// Viewing conditions, recorded with the study but not enforced.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisplayMetadata {
    #[serde(default)]
    pub luminance_cd_m2: Option<f64>,
    #[serde(default)]
    pub viewing_distance_cm: Option<f64>,
    #[serde(default)]
    pub notes: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudySpec {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    /// Scored stimuli. Every two models that share an `image_id` form a pair.
    pub stimuli: Vec<Stimulus>,
    /// Practice stimuli, paired the same way and shown first.
    #[serde(default)]
    pub training: Vec<Stimulus>,
    #[serde(default)]
    pub assignment: Assignment,
    #[serde(default)]
    pub metadata: DisplayMetadata,
}

/// An unordered pair of stimuli of the same source image. `stim_a` holds the
/// model that sorts first.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    pub pair_id: String,
    pub image_id: String,
    pub model_a: String,
    pub model_b: String,
    pub stim_a: usize,
    pub stim_b: usize,
    pub training: bool,
}

/// A scheduled presentation; `swap` puts `model_b` on the left.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trial {
    pub pair: usize,
    pub swap: bool,
}

/// All unordered model pairs per source image, `K·N(N-1)/2` for `K` images
/// shown by `N` models each. Stimulus indices start at `offset`.
pub fn build_pairs(stimuli: &[Stimulus], offset: usize, training: bool) -> ServiceResult<Vec<Pair>> {
    let mut by_image: BTreeMap<&str, BTreeMap<&str, usize>> = BTreeMap::new();
    for (k, s) in stimuli.iter().enumerate() {
        if s.image_id.is_empty() || s.model.is_empty() {
            return Err(ServiceError::Invalid(format!("stimulus {k} has an empty image id or model")));
        }
        if by_image.entry(&s.image_id).or_default().insert(&s.model, offset + k).is_some() {
            return Err(ServiceError::Invalid(format!("image {} listed twice for model {}", s.image_id, s.model)));
        }
    }
    let mut pairs = Vec::new();
    for (image, models) in by_image {
        if models.len() < 2 {
            return Err(ServiceError::Invalid(format!("image {image} has a single model; nothing to compare")));
        }
        let models: Vec<(&str, usize)> = models.into_iter().collect();
        for (i, &(a, sa)) in models.iter().enumerate() {
            for &(b, sb) in &models[i + 1..] {
                let prefix = if training { "practice/" } else { "" };
                pairs.push(Pair {
                    pair_id: format!("{prefix}{image}:{a}|{b}"),
                    image_id: image.to_string(),
                    model_a: a.to_string(),
                    model_b: b.to_string(),
                    stim_a: sa,
                    stim_b: sb,
                    training,
                });
            }
        }
    }
    Ok(pairs)
}

/// Default schedule seed of an observer: the study seed mixed with a hash of
/// the observer id.
pub fn observer_seed(study_seed: u64, observer_id: &str) -> u64 {
    let digest = Sha256::new().chain_update(study_seed.to_le_bytes()).chain_update(observer_id.as_bytes()).finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Balanced side pattern shared by every observer of a study: half of the
/// pairs start swapped, chosen by the study seed.
fn base_sides(n: usize, study_seed: u64, stream: u64) -> Vec<bool> {
    let mut sides: Vec<bool> = (0..n).map(|i| i % 2 == 1).collect();
    let mut r = rng(study_seed);
    r.set_stream(stream);
    sides.shuffle(&mut r);
    sides
}

/// Trial order for the `ordinal`-th observer of a study: practice pairs first,
/// then the observer's scored pairs, each block shuffled by `seed`.
///
/// Sides follow the study-wide balanced pattern, flipped for every other
/// observer who sees the pair. So within a session left/right counts differ
/// by at most one, and so do each pair's counts across the study.
pub fn schedule(pairs: &[Pair], study_seed: u64, seed: u64, ordinal: usize, assignment: Assignment) -> ServiceResult<Vec<Trial>> {
    let (block, round) = match assignment {
        Assignment::All => (None, ordinal),
        Assignment::Split { groups } => {
            if groups == 0 {
                return Err(ServiceError::Invalid("split assignment needs at least one group".into()));
            }
            (Some((groups, ordinal % groups)), ordinal / groups)
        }
    };
    let flip = round % 2 == 1;
    let mut r = rng(seed);
    let mut out = Vec::with_capacity(pairs.len());
    for (stream, training) in [(1, true), (2, false)] {
        let idx: Vec<usize> = pairs.iter().enumerate().filter(|(_, p)| p.training == training).map(|(i, _)| i).collect();
        let sides = base_sides(idx.len(), study_seed, stream);
        let mut trials: Vec<Trial> = idx
            .iter()
            .zip(sides)
            .enumerate()
            .filter(|(k, _)| training || block.is_none_or(|(g, b)| k % g == b))
            .map(|(_, (&pair, side))| Trial { pair, swap: side ^ flip })
            .collect();
        trials.shuffle(&mut r);
        out.extend(trials);
    }
    Ok(out)
}
