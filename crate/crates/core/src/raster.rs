//! Channels-last image grids and binary masks.
//!
//! A [`Raster`] is tagged with the coordinate domain it lives in so that a
//! polar image cannot be passed where a Cartesian one is expected. Rows of a
//! [`PolarRaster`] index the radius, columns index the angle.

use std::marker::PhantomData;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cartesian;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Polar;

#[derive(Debug)]
pub struct Raster<D> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
    _domain: PhantomData<D>,
}

impl<D> Clone for Raster<D> {
    fn clone(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.clone(),
            _domain: PhantomData,
        }
    }
}

impl<D> PartialEq for Raster<D> {
    fn eq(&self, other: &Self) -> bool {
        (self.height, self.width, self.channels) == (other.height, other.width, other.channels) && self.data == other.data
    }
}

pub type CartesianRaster = Raster<Cartesian>;
pub type PolarRaster = Raster<Polar>;

impl<D> Raster<D> {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
            _domain: PhantomData,
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::invalid(format!(
                "raster dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::shape(height * width * channels, data.len()));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("raster contains non-finite value {v}")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
            _domain: PhantomData,
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for i in 0..height {
            for j in 0..width {
                for c in 0..channels {
                    data.push(f(i, j, c));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
            _domain: PhantomData,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.data[(row * self.width + col) * self.channels + ch]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, value: f32) {
        self.data[(row * self.width + col) * self.channels + ch] = value;
    }

    /// Reinterprets the same values in another coordinate domain.
    pub fn retag<E>(self) -> Raster<E> {
        Raster {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data,
            _domain: PhantomData,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    /// Single channel extracted as its own raster.
    pub fn channel(&self, ch: usize) -> Self {
        Self::from_fn(self.height, self.width, 1, |i, j, _| self.get(i, j, ch))
    }

    /// Bilinear resample to a new size (pixel-center aligned).
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Self {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        Self::from_fn(height, width, self.channels, |i, j, c| {
            let y = (i as f64 + 0.5) * sy - 0.5;
            let x = (j as f64 + 0.5) * sx - 0.5;
            bilinear_clamped(self, x, y, c)
        })
    }

    pub fn to_mask(&self, threshold: f32) -> Mask {
        Mask::from_fn(self.height, self.width, |i, j| self.get(i, j, 0) >= threshold)
    }
}

/// Samples channel `ch` at continuous pixel position `(x, y)` (x = column,
/// y = row), clamping coordinates to the image border.
pub(crate) fn bilinear_clamped<D>(img: &Raster<D>, x: f64, y: f64, ch: usize) -> f32 {
    let max_x = (img.width - 1) as f64;
    let max_y = (img.height - 1) as f64;
    let x = x.clamp(0.0, max_x);
    let y = y.clamp(0.0, max_y);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(img.width - 1);
    let y1 = (y0 + 1).min(img.height - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let top = img.get(y0, x0, ch) as f64 * (1.0 - fx) + img.get(y0, x1, ch) as f64 * fx;
    let bottom = img.get(y1, x0, ch) as f64 * (1.0 - fx) + img.get(y1, x1, ch) as f64 * fx;
    (top * (1.0 - fy) + bottom * fy) as f32
}

pub(crate) fn nearest_clamped<D>(img: &Raster<D>, x: f64, y: f64, ch: usize) -> f32 {
    let col = (x.round().max(0.0) as usize).min(img.width - 1);
    let row = (y.round().max(0.0) as usize).min(img.height - 1);
    img.get(row, col, ch)
}

/// Binary raster. Foreground is `true`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(height * width, data.len()));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for i in 0..height {
            for j in 0..width {
                data.push(f(i, j));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.data[row * self.width + col] = value;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn intersect(&self, other: &Mask) -> Result<Mask> {
        self.check_same_shape(other)?;
        Ok(Mask {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(a, b)| *a && *b).collect(),
        })
    }

    /// `self ⊆ other`.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.shape() == other.shape() && self.data.iter().zip(&other.data).all(|(a, b)| !*a || *b)
    }

    pub(crate) fn check_same_shape(&self, other: &Mask) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(self.shape(), other.shape()));
        }
        Ok(())
    }

    /// Foreground pixel coordinates as `(row, col)`, in row-major order.
    pub fn foreground(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(k, _)| (k / self.width, k % self.width))
    }

    pub fn to_raster<D>(&self) -> Raster<D> {
        Raster::from_fn(self.height, self.width, 1, |i, j, _| {
            if self.get(i, j) {
                1.0
            } else {
                0.0
            }
        })
    }

    pub fn resize_nearest(&self, height: usize, width: usize) -> Mask {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        Mask::from_fn(height, width, |i, j| {
            let y = (((i as f64 + 0.5) * sy).floor() as usize).min(self.height - 1);
            let x = (((j as f64 + 0.5) * sx).floor() as usize).min(self.width - 1);
            self.get(y, x)
        })
    }

    /// Pixels of the mask that have a 4-neighbour outside the mask.
    pub fn boundary(&self) -> Mask {
        Mask::from_fn(self.height, self.width, |i, j| {
            if !self.get(i, j) {
                return false;
            }
            let up = i == 0 || !self.get(i - 1, j);
            let down = i + 1 == self.height || !self.get(i + 1, j);
            let left = j == 0 || !self.get(i, j - 1);
            let right = j + 1 == self.width || !self.get(i, j + 1);
            up || down || left || right
        })
    }
}

/// Optic disc and optic cup masks of one sample. Ground truth satisfies
/// `cup ⊆ disc`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPair {
    pub disc: Mask,
    pub cup: Mask,
}

impl MaskPair {
    pub fn new(disc: Mask, cup: Mask) -> Result<Self> {
        disc.check_same_shape(&cup)?;
        Ok(Self { disc, cup })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.disc.shape()
    }

    pub fn is_nested(&self) -> bool {
        self.cup.is_subset_of(&self.disc)
    }
}
