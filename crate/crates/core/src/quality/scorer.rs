use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::ImageGrid;

use super::logistic::LogisticParams;

/// A differentiable no-reference quality model. Higher scores mean better
/// predicted quality.
pub trait QualityScorer: Send + Sync {
    fn id(&self) -> &str;

    /// Nominal `(min, max)` of the score.
    fn range(&self) -> (f64, f64);

    fn score(&self, x: &ImageGrid) -> Result<f64> {
        Ok(self.score_grad(x)?.0)
    }

    /// Score together with its gradient with respect to `x`.
    fn score_grad(&self, x: &ImageGrid) -> Result<(f64, ImageGrid)>;
}

impl<S: QualityScorer + ?Sized> QualityScorer for Arc<S> {
    fn id(&self) -> &str {
        (**self).id()
    }
    fn range(&self) -> (f64, f64) {
        (**self).range()
    }
    fn score(&self, x: &ImageGrid) -> Result<f64> {
        (**self).score(x)
    }
    fn score_grad(&self, x: &ImageGrid) -> Result<(f64, ImageGrid)> {
        (**self).score_grad(x)
    }
}

pub(crate) fn check_input(x: &ImageGrid) -> Result<()> {
    if x.is_empty() || !x.is_finite() {
        return Err(Error::Contract("scorer input must be finite and non-empty".into()));
    }
    Ok(())
}

/// Contrast floor of the per-crop normalisation.
const CONTRAST_FLOOR: f64 = 0.05;

/// Learned scorers see each input twice: mean-centred (absolute detail and noise
/// levels) and additionally divided by its floored contrast (sharpness
/// independent of content contrast). Returns the stacked input, the
/// normalised crop and the contrast scale.
pub(crate) fn crop_input(x: &ImageGrid) -> (ImageGrid, ImageGrid, f64) {
    let m = x.mean();
    let centred = x.map(|a| a - m);
    let v = centred.dot(&centred) / x.len() as f64;
    let s = (v + CONTRAST_FLOOR * CONTRAST_FLOOR).sqrt();
    let z = centred.scale(1.0 / s);
    (ImageGrid::concat_channels(&[&centred, &z]), z, s)
}

pub(crate) fn crop_input_backward(z: &ImageGrid, s: f64, g: &ImageGrid) -> ImageGrid {
    let (gc, gz) = g.split_channels(z.channels());
    let n = z.len() as f64;
    let (mc, mz, mzz) = (gc.sum() / n, gz.sum() / n, gz.dot(z) / n);
    ImageGrid::from_fn(z.channels(), z.height(), z.width(), |c, y, x| {
        let zz = z.get(c, y, x);
        gc.get(c, y, x) - mc + (gz.get(c, y, x) - mz - zz * mzz) / s
    })
}

/// Forward differences along both axes, visited as `(index, neighbour)`.
fn for_each_difference(x: &ImageGrid, mut f: impl FnMut(usize, usize)) {
    let (c, h, w) = x.shape();
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..h {
            for xx in 0..w {
                let i = base + y * w + xx;
                if xx + 1 < w {
                    f(i, i + 1);
                }
                if y + 1 < h {
                    f(i, i + w);
                }
            }
        }
    }
}

/// Negative (Charbonnier-smoothed, anisotropic) total variation per pixel.
/// A constant image scores exactly zero, the maximum.
#[derive(Clone, Debug)]
pub struct NegTotalVariation {
    pub smoothing: f64,
}

impl Default for NegTotalVariation {
    fn default() -> Self {
        Self { smoothing: 1e-3 }
    }
}

impl QualityScorer for NegTotalVariation {
    fn id(&self) -> &str {
        "neg-tv"
    }

    fn range(&self) -> (f64, f64) {
        (-4.0, 0.0)
    }

    fn score_grad(&self, x: &ImageGrid) -> Result<(f64, ImageGrid)> {
        check_input(x)?;
        let e = self.smoothing;
        let n = x.len() as f64;
        let v = x.as_slice();
        let mut grad = ImageGrid::zeros_like(x);
        let mut total = 0.0;
        {
            let g = grad.as_mut_slice();
            for_each_difference(x, |i, j| {
                let d = v[j] - v[i];
                let r = (d * d + e * e).sqrt();
                total += r - e;
                let k = d / r / n;
                g[j] -= k;
                g[i] += k;
            });
        }
        Ok((-total / n, grad))
    }
}

/// Mean squared gradient magnitude; blur lowers it.
#[derive(Clone, Debug, Default)]
pub struct GradientSharpness;

impl QualityScorer for GradientSharpness {
    fn id(&self) -> &str {
        "sharpness"
    }

    fn range(&self) -> (f64, f64) {
        (0.0, 8.0)
    }

    fn score_grad(&self, x: &ImageGrid) -> Result<(f64, ImageGrid)> {
        check_input(x)?;
        let n = x.len() as f64;
        let v = x.as_slice();
        let mut grad = ImageGrid::zeros_like(x);
        let mut total = 0.0;
        {
            let g = grad.as_mut_slice();
            for_each_difference(x, |i, j| {
                let d = v[j] - v[i];
                total += d * d;
                g[j] += 2.0 * d / n;
                g[i] -= 2.0 * d / n;
            });
        }
        Ok((total / n, grad))
    }
}

/// A scorer composed with a four-parameter logistic, mapping its output
/// into `(0, 1)`.
#[derive(Clone)]
pub struct Calibrated<S> {
    pub inner: S,
    pub logistic: LogisticParams,
    id: String,
}

impl<S: QualityScorer> Calibrated<S> {
    pub fn new(inner: S, logistic: LogisticParams) -> Self {
        let id = format!("{}+logistic", inner.id());
        Self {
            inner,
            logistic,
            id,
        }
    }
}

impl<S: QualityScorer> QualityScorer for Calibrated<S> {
    fn id(&self) -> &str {
        &self.id
    }

    fn range(&self) -> (f64, f64) {
        (self.logistic.lower(), self.logistic.upper())
    }

    fn score_grad(&self, x: &ImageGrid) -> Result<(f64, ImageGrid)> {
        let (q, g) = self.inner.score_grad(x)?;
        let (v, dv) = self.logistic.value_and_slope(q);
        Ok((v, g.scale(dv)))
    }
}
