use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::grid::ImageGrid;
use crate::resample::{resize_bicubic, scaled_len, BicubicResize};
use crate::synth::rng;

/// Three-level pyramid: the original, a `mid_scale` downscale and a level
/// whose shortest side equals `base`; `crops_per_level` square crops of side
/// `base` are read from each level.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PyramidConfig {
    pub base: usize,
    pub mid_scale: f64,
    pub crops_per_level: usize,
    pub seed: u64,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        Self {
            base: 32,
            mid_scale: 0.75,
            crops_per_level: 2,
            seed: 0,
        }
    }
}

impl PyramidConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.base >= 4 && self.base % 4 == 0, Config, "crop side must be a positive multiple of 4");
        ensure!(
            self.mid_scale > 0.0 && self.mid_scale <= 1.0,
            Config,
            "middle pyramid scale must lie in (0, 1]"
        );
        ensure!(self.crops_per_level >= 1, Config, "at least one crop per level is required");
        Ok(())
    }
}

/// Level sizes for an `h x w` input. A middle level that would fall below the
/// crop side keeps the original size, so a `base x base` input yields three
/// identical levels.
pub fn pyramid_sizes(h: usize, w: usize, cfg: &PyramidConfig) -> Result<[(usize, usize); 3]> {
    cfg.validate()?;
    let b = cfg.base;
    ensure!(
        h.min(w) >= b,
        Contract,
        "image {h}x{w} is smaller than the {b}x{b} crop size"
    );
    let mid = (scaled_len(h, cfg.mid_scale), scaled_len(w, cfg.mid_scale));
    let mid = if mid.0.min(mid.1) < b { (h, w) } else { mid };
    let low = if h <= w {
        (b, (w * b + h / 2) / h)
    } else {
        ((h * b + w / 2) / w, b)
    };
    Ok([(h, w), mid, low])
}

pub fn build_pyramid(x: &ImageGrid, cfg: &PyramidConfig) -> Result<Vec<ImageGrid>> {
    let sizes = pyramid_sizes(x.height(), x.width(), cfg)?;
    sizes
        .iter()
        .map(|&(h, w)| {
            if (h, w) == (x.height(), x.width()) {
                Ok(x.clone())
            } else {
                resize_bicubic(x, h, w)
            }
        })
        .collect()
}

/// The top-left corner of a crop on a given level.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropWindow {
    pub level: usize,
    pub top: usize,
    pub left: usize,
}

fn anchors(len: usize, b: usize) -> Vec<usize> {
    let mut a = vec![0, (len - b) / 2, len - b];
    a.dedup();
    a
}

/// Crop corners for every level, drawn without replacement from a 3x3 grid
/// of anchors (start, centre, end per axis) by a generator seeded from the
/// config. Images of equal size always get the same crops.
pub fn crop_windows(h: usize, w: usize, cfg: &PyramidConfig) -> Result<Vec<CropWindow>> {
    let sizes = pyramid_sizes(h, w, cfg)?;
    let mut out = Vec::new();
    for (level, &(lh, lw)) in sizes.iter().enumerate() {
        let mut cands: Vec<(usize, usize)> = anchors(lh, cfg.base)
            .into_iter()
            .flat_map(|t| anchors(lw, cfg.base).into_iter().map(move |l| (t, l)))
            .collect();
        let mut r = rng(cfg.seed.wrapping_mul(31).wrapping_add(level as u64));
        cands.shuffle(&mut r);
        for i in 0..cfg.crops_per_level {
            let (top, left) = cands[i % cands.len()];
            out.push(CropWindow { level, top, left });
        }
    }
    Ok(out)
}

pub(crate) fn crop(x: &ImageGrid, top: usize, left: usize, side: usize) -> ImageGrid {
    ImageGrid::from_fn(x.channels(), side, side, |c, y, xx| x.get(c, top + y, left + xx))
}

/// Cached resizers so gradients can be pulled back to the input.
pub(crate) struct PyramidOp {
    pub windows: Vec<CropWindow>,
    resizers: [Option<BicubicResize>; 3],
    sizes: [(usize, usize); 3],
    base: usize,
}

impl PyramidOp {
    pub fn new(h: usize, w: usize, cfg: &PyramidConfig) -> Result<Self> {
        let sizes = pyramid_sizes(h, w, cfg)?;
        let mk = |s: (usize, usize)| -> Result<Option<BicubicResize>> {
            if s == (h, w) {
                Ok(None)
            } else {
                BicubicResize::new(h, w, s.0, s.1).map(Some)
            }
        };
        Ok(Self {
            windows: crop_windows(h, w, cfg)?,
            resizers: [mk(sizes[0])?, mk(sizes[1])?, mk(sizes[2])?],
            sizes,
            base: cfg.base,
        })
    }

    pub fn crops(&self, x: &ImageGrid) -> Vec<ImageGrid> {
        let levels: Vec<ImageGrid> = self
            .resizers
            .iter()
            .map(|r| r.as_ref().map_or_else(|| x.clone(), |r| r.apply(x)))
            .collect();
        self.windows
            .iter()
            .map(|w| crop(&levels[w.level], w.top, w.left, self.base))
            .collect()
    }

    /// Pull crop gradients back to the input image.
    pub fn backward(&self, channels: usize, crop_grads: &[ImageGrid]) -> ImageGrid {
        let mut levels: Vec<ImageGrid> = self
            .sizes
            .iter()
            .map(|&(h, w)| ImageGrid::zeros(channels, h, w))
            .collect();
        for (win, g) in self.windows.iter().zip(crop_grads) {
            let level = &mut levels[win.level];
            for c in 0..channels {
                for y in 0..self.base {
                    for xx in 0..self.base {
                        let v = level.get(c, win.top + y, win.left + xx) + g.get(c, y, xx);
                        level.set(c, win.top + y, win.left + xx, v);
                    }
                }
            }
        }
        let (h, w) = self.sizes[0];
        let mut out = ImageGrid::zeros(channels, h, w);
        for (r, g) in self.resizers.iter().zip(&levels) {
            match r {
                Some(r) => out.axpy(1.0, &r.apply_transpose(g)),
                None => out.axpy(1.0, g),
            }
        }
        out
    }
}
