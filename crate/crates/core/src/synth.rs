//! Procedurally generated toy images and synthetic distortions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::grid::ImageGrid;

/// Seeded generator for the toy image domain.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_color(rng: &mut impl Rng, channels: usize) -> Vec<f64> {
    (0..channels).map(|_| rng.random_range(-0.85..0.85)).collect()
}

/// A smooth background with a few flat-shaded shapes and occasional stripes.
pub fn toy_image(rng: &mut impl Rng, channels: usize, height: usize, width: usize) -> ImageGrid {
    let base = random_color(rng, channels);
    let tilt: Vec<(f64, f64)> = (0..channels)
        .map(|_| (rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4)))
        .collect();
    let mut img = ImageGrid::from_fn(channels, height, width, |c, y, x| {
        let u = y as f64 / height as f64 - 0.5;
        let v = x as f64 / width as f64 - 0.5;
        base[c] + tilt[c].0 * u + tilt[c].1 * v
    });

    let shapes = rng.random_range(1..=3);
    for _ in 0..shapes {
        let color = random_color(rng, channels);
        let cy = rng.random_range(0.15..0.85) * height as f64;
        let cx = rng.random_range(0.15..0.85) * width as f64;
        let r = rng.random_range(0.12..0.3) * height.min(width) as f64;
        let kind = rng.random_range(0..3);
        let period = rng.random_range(2.5..5.0);
        for y in 0..height {
            for x in 0..width {
                let dy = y as f64 + 0.5 - cy;
                let dx = x as f64 + 0.5 - cx;
                let inside = match kind {
                    0 => dy * dy + dx * dx <= r * r,
                    1 => dy.abs() <= r && dx.abs() <= 0.7 * r,
                    _ => dy.abs() <= r && dx.abs() <= r && ((x as f64 / period) as i64) % 2 == 0,
                };
                if inside {
                    for (c, &v) in color.iter().enumerate() {
                        img.set(c, y, x, v);
                    }
                }
            }
        }
    }
    img.clamp(-1.0, 1.0)
}

/// `n` toy images from one seed.
pub fn toy_dataset(n: usize, channels: usize, size: usize, seed: u64) -> Vec<ImageGrid> {
    let mut r = rng(seed);
    (0..n).map(|_| toy_image(&mut r, channels, size, size)).collect()
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    while i < 0 || i >= n {
        i = if i < 0 { -i - 1 } else { 2 * n - i - 1 };
    }
    i as usize
}

/// Separable Gaussian blur with reflected borders.
pub fn gaussian_blur(x: &ImageGrid, sigma: f64) -> ImageGrid {
    if sigma <= 0.0 {
        return x.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let (c, h, w) = x.shape();
    let mut tmp = ImageGrid::zeros(c, h, w);
    for ch in 0..c {
        for yy in 0..h {
            for xx in 0..w {
                let v: f64 = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, &wk)| wk * x.get(ch, yy, reflect(xx as isize + k as isize - radius, w)))
                    .sum();
                tmp.set(ch, yy, xx, v);
            }
        }
    }
    let mut out = ImageGrid::zeros(c, h, w);
    for ch in 0..c {
        for yy in 0..h {
            for xx in 0..w {
                let v: f64 = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, &wk)| wk * tmp.get(ch, reflect(yy as isize + k as isize - radius, h), xx))
                    .sum();
                out.set(ch, yy, xx, v);
            }
        }
    }
    out
}

/// Additive white Gaussian noise.
pub fn add_noise(x: &ImageGrid, sigma: f64, rng: &mut impl Rng) -> ImageGrid {
    let mut out = x.clone();
    for v in out.as_mut_slice() {
        let n: f64 = StandardNormal.sample(rng);
        *v += sigma * n;
    }
    out
}

/// Blend each pixel towards its block mean, mimicking coarse block coding.
pub fn block_artifacts(x: &ImageGrid, block: usize, strength: f64) -> ImageGrid {
    let (c, h, w) = x.shape();
    let mut out = x.clone();
    for ch in 0..c {
        for by in (0..h).step_by(block) {
            for bx in (0..w).step_by(block) {
                let ys = by..(by + block).min(h);
                let xs = bx..(bx + block).min(w);
                let n = (ys.len() * xs.len()) as f64;
                let mean: f64 = ys
                    .clone()
                    .flat_map(|y| xs.clone().map(move |xx| (y, xx)))
                    .map(|(y, xx)| x.get(ch, y, xx))
                    .sum::<f64>()
                    / n;
                for y in ys.clone() {
                    for xx in xs.clone() {
                        let v = x.get(ch, y, xx);
                        out.set(ch, y, xx, (1.0 - strength) * v + strength * mean);
                    }
                }
            }
        }
    }
    out
}

/// Synthetic distortion families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distortion {
    Blur,
    Noise,
    Block,
}

impl Distortion {
    pub const ALL: [Distortion; 3] = [Distortion::Blur, Distortion::Noise, Distortion::Block];

    /// Apply the distortion at `severity` in `[0, 1]`; zero is the identity.
    pub fn apply(self, x: &ImageGrid, severity: f64, rng: &mut impl Rng) -> ImageGrid {
        let s = severity.clamp(0.0, 1.0);
        if s == 0.0 {
            return x.clone();
        }
        match self {
            Distortion::Blur => gaussian_blur(x, 2.0 * s),
            Distortion::Noise => add_noise(x, 0.35 * s, rng).clamp(-1.0, 1.0),
            Distortion::Block => block_artifacts(x, 8, s),
        }
    }
}

/// A distorted image with the severity that produced it.
#[derive(Clone, Debug)]
pub struct DistortedSample {
    pub image: ImageGrid,
    pub source: usize,
    pub distortion: Distortion,
    pub severity: f64,
}

/// Every source image at `levels` evenly spaced severities of each listed
/// distortion (severity zero included once per source).
pub fn distorted_set(
    sources: &[ImageGrid],
    distortions: &[Distortion],
    levels: usize,
    seed: u64,
) -> Vec<DistortedSample> {
    let mut r = rng(seed);
    let mut out = Vec::new();
    for (i, src) in sources.iter().enumerate() {
        out.push(DistortedSample {
            image: src.clone(),
            source: i,
            distortion: distortions[0],
            severity: 0.0,
        });
        for &d in distortions {
            for l in 1..=levels {
                let severity = l as f64 / levels as f64;
                out.push(DistortedSample {
                    image: d.apply(src, severity, &mut r),
                    source: i,
                    distortion: d,
                    severity,
                });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_images_are_in_range_and_seeded() {
        let a = toy_dataset(4, 3, 32, 7);
        let b = toy_dataset(4, 3, 32, 7);
        assert_eq!(a, b);
        for img in &a {
            assert_eq!(img.shape(), (3, 32, 32));
            assert!(img.as_slice().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
        assert_ne!(a[0], a[1]);
    }

    #[test]
    fn blur_preserves_constants_and_mean() {
        let flat = ImageGrid::full(1, 16, 16, 0.25);
        assert!(gaussian_blur(&flat, 1.5).max_abs_diff(&flat) < 1e-12);
        let img = toy_dataset(1, 1, 32, 3).remove(0);
        let blurred = gaussian_blur(&img, 1.0);
        assert!((blurred.mean() - img.mean()).abs() < 0.02);
    }

    #[test]
    fn block_artifacts_at_full_strength_are_piecewise_constant() {
        let img = toy_dataset(1, 1, 16, 5).remove(0);
        let b = block_artifacts(&img, 8, 1.0);
        for y in 0..8 {
            for x in 0..8 {
                assert!((b.get(0, y, x) - b.get(0, 0, 0)).abs() < 1e-12);
            }
        }
    }
}
