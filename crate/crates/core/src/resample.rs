//! Separable bicubic resampling as an explicit linear operator.
//!
//! Weights follow the antialiased convolution scheme used by common imaging
//! libraries: the Keys cubic kernel (`a = -0.5`) is stretched by the
//! downscale factor so every input pixel contributes, and each output tap row
//! is normalised to sum to one. Because the operator is linear its adjoint
//! is available for backpropagation.

use crate::error::{ensure, Result};
use crate::grid::ImageGrid;

fn keys_cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x < 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        (((x - 5.0) * x + 8.0) * x - 4.0) * A
    } else {
        0.0
    }
}

/// One-dimensional resampling taps: output `i` reads `weights[i]` starting at
/// input index `start[i]`.
#[derive(Clone, Debug)]
struct Taps {
    input: usize,
    start: Vec<usize>,
    weights: Vec<Vec<f64>>,
}

impl Taps {
    fn new(input: usize, output: usize) -> Self {
        let scale = input as f64 / output as f64;
        let filter_scale = scale.max(1.0);
        let support = 2.0 * filter_scale;
        let mut start = Vec::with_capacity(output);
        let mut weights = Vec::with_capacity(output);
        for i in 0..output {
            let center = (i as f64 + 0.5) * scale;
            let lo = ((center - support + 0.5).floor().max(0.0)) as usize;
            let hi = ((center + support + 0.5).floor() as usize).min(input);
            let mut w: Vec<f64> = (lo..hi)
                .map(|j| keys_cubic((j as f64 - center + 0.5) / filter_scale))
                .collect();
            let total: f64 = w.iter().sum();
            if total != 0.0 {
                w.iter_mut().for_each(|v| *v /= total);
            }
            start.push(lo);
            weights.push(w);
        }
        Self {
            input,
            start,
            weights,
        }
    }

    fn output(&self) -> usize {
        self.start.len()
    }
}

/// Bicubic resize between two fixed spatial sizes.
#[derive(Clone, Debug)]
pub struct BicubicResize {
    rows: Taps,
    cols: Taps,
}

impl BicubicResize {
    pub fn new(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Result<Self> {
        ensure!(
            in_h > 0 && in_w > 0 && out_h > 0 && out_w > 0,
            Contract,
            "resize between empty sizes {in_h}x{in_w} -> {out_h}x{out_w}"
        );
        Ok(Self {
            rows: Taps::new(in_h, out_h),
            cols: Taps::new(in_w, out_w),
        })
    }

    pub fn input_size(&self) -> (usize, usize) {
        (self.rows.input, self.cols.input)
    }

    pub fn output_size(&self) -> (usize, usize) {
        (self.rows.output(), self.cols.output())
    }

    pub fn apply(&self, x: &ImageGrid) -> ImageGrid {
        let (c, h, w) = x.shape();
        assert_eq!((h, w), self.input_size(), "resize input size");
        let (oh, ow) = self.output_size();
        let mut out = ImageGrid::zeros(c, oh, ow);
        let mut tmp = vec![0.0; h * ow];
        for ch in 0..c {
            let src = x.channel(ch);
            // horizontal pass
            for y in 0..h {
                let row = &src[y * w..(y + 1) * w];
                for (ox, (&s, wt)) in self.cols.start.iter().zip(&self.cols.weights).enumerate() {
                    tmp[y * ow + ox] = wt.iter().zip(&row[s..]).map(|(a, b)| a * b).sum();
                }
            }
            // vertical pass
            let dst = out.channel_mut(ch);
            for (oy, (&s, wt)) in self.rows.start.iter().zip(&self.rows.weights).enumerate() {
                let drow = &mut dst[oy * ow..(oy + 1) * ow];
                for (k, &wk) in wt.iter().enumerate() {
                    let srow = &tmp[(s + k) * ow..(s + k + 1) * ow];
                    for (d, &v) in drow.iter_mut().zip(srow) {
                        *d += wk * v;
                    }
                }
            }
        }
        out
    }

    /// Adjoint of [`apply`](Self::apply): maps an output-space gradient back
    /// to input space.
    pub fn apply_transpose(&self, g: &ImageGrid) -> ImageGrid {
        let (c, oh, ow) = g.shape();
        assert_eq!((oh, ow), self.output_size(), "resize adjoint size");
        let (h, w) = self.input_size();
        let mut out = ImageGrid::zeros(c, h, w);
        let mut tmp = vec![0.0; h * ow];
        for ch in 0..c {
            tmp.iter_mut().for_each(|v| *v = 0.0);
            let src = g.channel(ch);
            for (oy, (&s, wt)) in self.rows.start.iter().zip(&self.rows.weights).enumerate() {
                let grow = &src[oy * ow..(oy + 1) * ow];
                for (k, &wk) in wt.iter().enumerate() {
                    let trow = &mut tmp[(s + k) * ow..(s + k + 1) * ow];
                    for (t, &v) in trow.iter_mut().zip(grow) {
                        *t += wk * v;
                    }
                }
            }
            let dst = out.channel_mut(ch);
            for y in 0..h {
                let trow = &tmp[y * ow..(y + 1) * ow];
                let drow = &mut dst[y * w..(y + 1) * w];
                for ((&s, wt), &v) in self.cols.start.iter().zip(&self.cols.weights).zip(trow) {
                    for (d, &wk) in drow[s..].iter_mut().zip(wt) {
                        *d += wk * v;
                    }
                }
            }
        }
        out
    }
}

/// Resize `x` to `out_h x out_w` with bicubic interpolation.
pub fn resize_bicubic(x: &ImageGrid, out_h: usize, out_w: usize) -> Result<ImageGrid> {
    Ok(BicubicResize::new(x.height(), x.width(), out_h, out_w)?.apply(x))
}

/// Output length when shrinking `len` by `factor`.
pub fn scaled_len(len: usize, factor: f64) -> usize {
    ((len as f64 * factor).round() as usize).max(1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(c: usize, h: usize, w: usize) -> ImageGrid {
        ImageGrid::from_fn(c, h, w, |c, y, x| (c as f64) + 0.1 * y as f64 - 0.05 * x as f64)
    }

    #[test]
    fn same_size_is_identity() {
        let x = ImageGrid::from_fn(2, 9, 7, |c, y, x| ((c * 31 + y * 7 + x * 3) % 11) as f64);
        let y = resize_bicubic(&x, 9, 7).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn constants_are_preserved() {
        let x = ImageGrid::full(1, 32, 48, 0.3);
        let y = resize_bicubic(&x, 24, 36).unwrap();
        assert!(y.as_slice().iter().all(|v| (v - 0.3).abs() < 1e-12));
        let z = resize_bicubic(&x, 8, 12).unwrap();
        assert!(z.as_slice().iter().all(|v| (v - 0.3).abs() < 1e-12));
    }

    #[test]
    fn adjoint_identity_holds() {
        let op = BicubicResize::new(13, 17, 6, 9).unwrap();
        let x = ramp(2, 13, 17).map(|v| (v * 3.1).sin());
        let g = ImageGrid::from_fn(2, 6, 9, |c, y, x| ((c + 2 * y + 3 * x) as f64).cos());
        let lhs = op.apply(&x).dot(&g);
        let rhs = x.dot(&op.apply_transpose(&g));
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn scaled_lengths() {
        assert_eq!(scaled_len(448, 0.75), 336);
        assert_eq!(scaled_len(96, 0.75), 72);
        assert_eq!(scaled_len(3, 0.1), 1);
    }
}
