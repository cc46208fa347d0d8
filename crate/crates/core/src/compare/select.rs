use std::collections::HashMap;
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::distance::{perceptual_distance_d1, semantic_set_distance_d2, Embedder};
use crate::error::{ensure, Result};
use crate::grid::ImageGrid;

/// Weight of the diversity term.
pub const DEFAULT_GAMMA: f64 = 0.1;

type EnhanceFn = dyn Fn(&ImageGrid) -> Result<ImageGrid> + Send + Sync;

/// An enhancement model with its outputs cached by image id.
pub struct EnhancerRecord {
    id: String,
    enhance: Box<EnhanceFn>,
    cache: Mutex<HashMap<String, ImageGrid>>,
}

impl EnhancerRecord {
    pub fn new(id: impl Into<String>, enhance: impl Fn(&ImageGrid) -> Result<ImageGrid> + Send + Sync + 'static) -> Self {
        Self {
            id: id.into(),
            enhance: Box::new(enhance),
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    /// Enhanced `x`, computed once per `image_id`.
    pub fn output(&self, image_id: &str, x: &ImageGrid) -> Result<ImageGrid> {
        if let Some(hit) = self.cache.lock().unwrap().get(image_id) {
            return Ok(hit.clone());
        }
        let out = (self.enhance)(x)?;
        ensure!(
            out.shape() == x.shape(),
            Contract,
            "enhancer {} changed the shape of {image_id}: {:?} -> {:?}",
            self.id,
            x.shape(),
            out.shape()
        );
        self.cache
            .lock()
            .unwrap()
            .insert(image_id.to_string(), out.clone());
        Ok(out)
    }

    pub fn cached(&self) -> usize {
        self.cache.lock().unwrap().len()
    }
}

/// One pool image as the selection sees it.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub id: String,
    /// Discrepancy between the two enhancers' outputs.
    pub d1: f64,
    pub embedding: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selected {
    pub id: String,
    pub d1: f64,
    pub d2: f64,
    pub objective: f64,
}

/// Greedy discrepancy selection: repeatedly take the remaining candidate
/// maximising `d1 + gamma * D2(x, chosen)`, ties going to the smaller id.
pub fn select_discriminative_subset(pool: &[Candidate], k: usize, gamma: f64) -> Result<Vec<Selected>> {
    ensure!(!pool.is_empty(), Config, "selection pool is empty");
    ensure!(k <= pool.len(), Config, "cannot select {k} images from a pool of {}", pool.len());
    ensure!(gamma >= 0.0 && gamma.is_finite(), Config, "gamma must be finite and >= 0, got {gamma}");
    let mut ids: Vec<&str> = pool.iter().map(|c| c.id.as_str()).collect();
    ids.sort_unstable();
    ensure!(ids.windows(2).all(|w| w[0] != w[1]), Config, "duplicate image ids in the pool");

    let mut remaining: Vec<usize> = (0..pool.len()).collect();
    let mut chosen: Vec<&[f64]> = Vec::with_capacity(k);
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let mut best: Option<(usize, Selected)> = None;
        for (slot, &i) in remaining.iter().enumerate() {
            let c = &pool[i];
            let d2 = semantic_set_distance_d2(&c.embedding, &chosen);
            let objective = c.d1 + gamma * d2;
            let better = match &best {
                None => true,
                Some((_, b)) => objective > b.objective || (objective == b.objective && c.id < b.id),
            };
            if better {
                best = Some((
                    slot,
                    Selected {
                        id: c.id.clone(),
                        d1: c.d1,
                        d2,
                        objective,
                    },
                ));
            }
        }
        let (slot, sel) = best.expect("remaining is non-empty");
        chosen.push(&pool[remaining.remove(slot)].embedding);
        out.push(sel);
    }
    Ok(out)
}

/// Enhance every pool image with both models, score their discrepancy and
/// embed the inputs, then select `k` images.
pub fn select_for_pair(
    pool: &[(String, ImageGrid)],
    a: &EnhancerRecord,
    b: &EnhancerRecord,
    embedder: &dyn Embedder,
    k: usize,
    gamma: f64,
) -> Result<Vec<Selected>> {
    ensure!(!pool.is_empty(), Config, "selection pool is empty");
    let candidates = pool
        .par_iter()
        .map(|(id, x)| {
            let d1 = perceptual_distance_d1(&a.output(id, x)?, &b.output(id, x)?)?;
            Ok(Candidate {
                id: id.clone(),
                d1,
                embedding: embedder.embed(x)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    select_discriminative_subset(&candidates, k, gamma)
}
