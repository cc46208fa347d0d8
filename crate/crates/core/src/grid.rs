//! Channel-first pixel grids.
//!
//! Values live in `[-1, 1]` by convention; 8-bit PNG files map linearly onto
//! that range (`0 -> -1`, `255 -> 1`).

use std::path::Path;

use image::{DynamicImage, GrayImage, RgbImage};
use ndarray::{Array3, Zip};

use crate::error::{ensure, Error, Result};
use crate::num::Real;

/// A `channels x height x width` grid of real values.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<F = f64> {
    data: Array3<F>,
}

/// The grid type images are enhanced in.
pub type ImageGrid = Grid<f64>;

impl<F: Real> Grid<F> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            data: Array3::zeros((channels, height, width)),
        }
    }

    pub fn full(channels: usize, height: usize, width: usize, value: F) -> Self {
        Self {
            data: Array3::from_elem((channels, height, width), value),
        }
    }

    pub fn zeros_like(other: &Self) -> Self {
        let (c, h, w) = other.shape();
        Self::zeros(c, h, w)
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, values: Vec<F>) -> Result<Self> {
        let data = Array3::from_shape_vec((channels, height, width), values)
            .map_err(|e| Error::Contract(format!("grid shape: {e}")))?;
        Ok(Self { data })
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> F,
    ) -> Self {
        Self {
            data: Array3::from_shape_fn((channels, height, width), |(c, y, x)| f(c, y, x)),
        }
    }

    pub fn from_array(data: Array3<F>) -> Self {
        // keep the standard layout the slice accessors rely on
        let data = if data.is_standard_layout() {
            data
        } else {
            data.as_standard_layout().into_owned()
        };
        Self { data }
    }

    /// `(channels, height, width)`
    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn array(&self) -> &Array3<F> {
        &self.data
    }

    pub fn into_array(self) -> Array3<F> {
        self.data
    }

    pub fn as_slice(&self) -> &[F] {
        self.data.as_slice().expect("grid is kept in standard layout")
    }

    pub fn as_mut_slice(&mut self) -> &mut [F] {
        self.data
            .as_slice_mut()
            .expect("grid is kept in standard layout")
    }

    /// Plane of a single channel, row-major.
    pub fn channel(&self, c: usize) -> &[F] {
        let (_, h, w) = self.shape();
        &self.as_slice()[c * h * w..(c + 1) * h * w]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [F] {
        let (_, h, w) = self.shape();
        &mut self.as_mut_slice()[c * h * w..(c + 1) * h * w]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> F {
        self.data[[c, y, x]]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: F) {
        self.data[[c, y, x]] = v;
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape() == other.shape()
    }

    pub fn check_same_shape(&self, other: &Self, what: &str) -> Result<()> {
        ensure!(
            self.same_shape(other),
            Contract,
            "{what}: shape {:?} does not match {:?}",
            self.shape(),
            other.shape()
        );
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self {
            data: self.data.mapv(f),
        }
    }

    /// `a * self + b * other`
    pub fn lin_comb(&self, a: F, other: &Self, b: F) -> Self {
        debug_assert!(self.same_shape(other));
        let mut out = self.data.clone();
        Zip::from(&mut out)
            .and(&other.data)
            .for_each(|o, &v| *o = a * *o + b * v);
        Self { data: out }
    }

    /// `self += k * other`
    pub fn axpy(&mut self, k: F, other: &Self) {
        debug_assert!(self.same_shape(other));
        Zip::from(&mut self.data)
            .and(&other.data)
            .for_each(|o, &v| *o += k * v);
    }

    pub fn add(&self, other: &Self) -> Self {
        self.lin_comb(F::one(), other, F::one())
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.lin_comb(F::one(), other, -F::one())
    }

    pub fn scale(&self, k: F) -> Self {
        self.map(|v| v * k)
    }

    pub fn dot(&self, other: &Self) -> F {
        debug_assert!(self.same_shape(other));
        self.as_slice()
            .iter()
            .zip(other.as_slice())
            .map(|(&a, &b)| a * b)
            .sum()
    }

    pub fn sum(&self) -> F {
        self.as_slice().iter().copied().sum()
    }

    pub fn mean(&self) -> F {
        self.sum() / F::of(self.len() as f64)
    }

    pub fn norm(&self) -> F {
        self.dot(self).sqrt()
    }

    pub fn max_abs(&self) -> F {
        self.as_slice()
            .iter()
            .fold(F::zero(), |m, &v| if v.abs() > m { v.abs() } else { m })
    }

    pub fn max_abs_diff(&self, other: &Self) -> F {
        debug_assert!(self.same_shape(other));
        self.as_slice()
            .iter()
            .zip(other.as_slice())
            .fold(F::zero(), |m, (&a, &b)| {
                let d = (a - b).abs();
                if d > m {
                    d
                } else {
                    m
                }
            })
    }

    pub fn clamp(&self, lo: F, hi: F) -> Self {
        self.map(|v| v.max(lo).min(hi))
    }

    pub fn cast<G: Real>(&self) -> Grid<G> {
        Grid {
            data: self.data.mapv(|v| G::of(v.f64())),
        }
    }

    /// Stack grids along the channel axis.
    pub fn concat_channels(parts: &[&Self]) -> Self {
        let (_, h, w) = parts[0].shape();
        let channels = parts.iter().map(|p| p.channels()).sum();
        let mut values = Vec::with_capacity(channels * h * w);
        for p in parts {
            debug_assert_eq!((p.height(), p.width()), (h, w));
            values.extend_from_slice(p.as_slice());
        }
        Self::from_vec(channels, h, w, values).expect("concatenated shape")
    }

    /// Split along the channel axis at `at`.
    pub fn split_channels(&self, at: usize) -> (Self, Self) {
        let (c, h, w) = self.shape();
        let s = self.as_slice();
        let first = Self::from_vec(at, h, w, s[..at * h * w].to_vec()).expect("split");
        let second = Self::from_vec(c - at, h, w, s[at * h * w..].to_vec()).expect("split");
        (first, second)
    }
}

impl ImageGrid {
    /// Read an 8-bit PNG. Grayscale images give one channel, everything else
    /// is converted to RGB.
    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path)?;
        Ok(Self::from_dynamic(&img))
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?;
        Ok(Self::from_dynamic(&img))
    }

    fn from_dynamic(img: &DynamicImage) -> Self {
        let to_unit = |p: u8| p as f64 / 127.5 - 1.0;
        match img {
            DynamicImage::ImageLuma8(_) | DynamicImage::ImageLuma16(_) => {
                let g = img.to_luma8();
                let (w, h) = g.dimensions();
                Self::from_fn(1, h as usize, w as usize, |_, y, x| {
                    to_unit(g.get_pixel(x as u32, y as u32)[0])
                })
            }
            _ => {
                let rgb = img.to_rgb8();
                let (w, h) = rgb.dimensions();
                Self::from_fn(3, h as usize, w as usize, |c, y, x| {
                    to_unit(rgb.get_pixel(x as u32, y as u32)[c])
                })
            }
        }
    }

    fn to_dynamic(&self) -> Result<DynamicImage> {
        let (c, h, w) = self.shape();
        let q = |v: f64| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8;
        match c {
            1 => Ok(DynamicImage::ImageLuma8(GrayImage::from_fn(
                w as u32,
                h as u32,
                |x, y| image::Luma([q(self.get(0, y as usize, x as usize))]),
            ))),
            3 => Ok(DynamicImage::ImageRgb8(RgbImage::from_fn(
                w as u32,
                h as u32,
                |x, y| {
                    let (x, y) = (x as usize, y as usize);
                    image::Rgb([q(self.get(0, y, x)), q(self.get(1, y, x)), q(self.get(2, y, x))])
                },
            ))),
            _ => Err(Error::Contract(format!(
                "PNG export needs 1 or 3 channels, got {c}"
            ))),
        }
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_dynamic()?.save(path.as_ref())?;
        Ok(())
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.to_dynamic()?
            .write_to(&mut out, image::ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    /// Round-trip through 8-bit quantisation.
    pub fn quantize_8bit(&self) -> Self {
        self.map(|v| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() / 127.5 - 1.0)
    }
}
