use crate::error::{ensure, Result};
use crate::grid::ImageGrid;
use crate::quality::CnnScorer;
use crate::resample::{resize_bicubic, scaled_len};

/// Levels of the dyadic pyramid behind [`perceptual_distance_d1`].
pub const D1_LEVELS: usize = 3;

/// Mean over a three-level dyadic (bicubic halving) pyramid of the RMS
/// pixel difference. Zero exactly when the inputs are equal, since the
/// finest level is the images themselves.
pub fn perceptual_distance_d1(a: &ImageGrid, b: &ImageGrid) -> Result<f64> {
    a.check_same_shape(b, "perceptual distance")?;
    ensure!(!a.is_empty(), Contract, "perceptual distance of empty images");
    let mut diff = a.sub(b);
    let mut total = 0.0;
    for level in 0..D1_LEVELS {
        if level > 0 {
            // the pyramid is linear, so the difference can be reduced directly
            let (h, w) = (diff.height(), diff.width());
            diff = resize_bicubic(&diff, scaled_len(h, 0.5), scaled_len(w, 0.5))?;
        }
        total += (diff.dot(&diff) / diff.len() as f64).sqrt();
    }
    Ok(total / D1_LEVELS as f64)
}

/// Maps images to feature vectors for the semantic distance.
pub trait Embedder: Sync {
    fn embed(&self, x: &ImageGrid) -> Result<Vec<f64>>;
}

impl Embedder for CnnScorer {
    fn embed(&self, x: &ImageGrid) -> Result<Vec<f64>> {
        self.embedding(x)
    }
}

/// `1 - cos(u, v)`, exactly zero for identical vectors. A zero vector is at
/// distance 1 from anything but another zero vector.
pub fn cosine_distance(u: &[f64], v: &[f64]) -> f64 {
    if u == v {
        return 0.0;
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    match (nu > 0.0, nv > 0.0) {
        (true, true) => (1.0 - dot / (nu * nv)).max(0.0),
        (false, false) => 0.0,
        _ => 1.0,
    }
}

/// Smallest cosine distance from `x` to any member of `set`; zero for the
/// empty set.
pub fn semantic_set_distance_d2(x: &[f64], set: &[&[f64]]) -> f64 {
    set.iter()
        .map(|s| cosine_distance(x, s))
        .fold(None, |m: Option<f64>, d| Some(m.map_or(d, |m| m.min(d))))
        .unwrap_or(0.0)
}
