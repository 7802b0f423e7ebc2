//! Planar three-channel fields and single-channel depth maps.
//!
//! Every three-channel quantity in the crate (radiance, transmission,
//! illumination, background light) shares one storage type, [`Field3`].
//! Values are stored planar: all of R, then all of G, then all of B, each
//! plane row-major.

use crate::error::{Error, Result};

/// Channel count of every [`Field3`].
pub const CHANNELS: usize = 3;

/// Channel indices. Storage order is always (R, G, B).
pub const RED: usize = 0;
pub const GREEN: usize = 1;
pub const BLUE: usize = 2;

/// A planar H×W×3 real-valued field.
#[derive(Debug, Clone, PartialEq)]
pub struct Field3 {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

/// Radiance image with values in [0, 1] at public boundaries.
pub type ImageRGB = Field3;
/// Per-pixel, per-channel quantity such as a transmission or illumination map.
pub type ScalarField3 = Field3;

impl Field3 {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        let expected = height * width * CHANNELS;
        if data.len() != expected {
            return Err(Error::InvalidArgument(format!(
                "field {height}x{width}x3 needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width * CHANNELS],
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    /// Builds a field whose channel `c` is the constant `values[c]`.
    pub fn from_channel_constants(height: usize, width: usize, values: [f64; 3]) -> Self {
        let plane = height * width;
        let mut data = Vec::with_capacity(plane * CHANNELS);
        for v in values {
            data.extend(std::iter::repeat_n(v, plane));
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * CHANNELS);
        for c in 0..CHANNELS {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
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

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Errors with [`Error::ShapeMismatch`] unless `other` has the same spatial size.
    pub fn ensure_same_shape(&self, other: &Field3) -> Result<()> {
        ensure_shape(self.shape(), other.shape())
    }

    /// Errors with [`Error::NonFinite`] on the first NaN or infinity.
    pub fn ensure_finite(&self) -> Result<()> {
        ensure_finite(&self.data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field3 {
        Field3 {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination of two same-shape fields.
    pub fn zip_map(&self, other: &Field3, f: impl Fn(f64, f64) -> f64) -> Result<Field3> {
        self.ensure_same_shape(other)?;
        Ok(Field3 {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Copies the `h`×`w` window whose top-left corner is (`top`, `left`).
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Field3> {
        if top + h > self.height || left + w > self.width {
            return Err(Error::InvalidArgument(format!(
                "crop {h}x{w} at ({top},{left}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        Ok(Field3::from_fn(h, w, |c, y, x| {
            self.get(c, top + y, left + x)
        }))
    }

    /// Pads by mirror reflection (edge pixel not repeated) to `h`×`w`,
    /// keeping the original at the top-left.
    pub fn reflect_pad(&self, h: usize, w: usize) -> Result<Field3> {
        if h < self.height || w < self.width {
            return Err(Error::InvalidArgument(format!(
                "pad target {h}x{w} smaller than {}x{}",
                self.height, self.width
            )));
        }
        Ok(Field3::from_fn(h, w, |c, y, x| {
            self.get(c, reflect(y, self.height), reflect(x, self.width))
        }))
    }
}

/// Mirror index `i` into `0..n` without repeating the edge sample.
pub(crate) fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

pub(crate) fn ensure_shape(expected: (usize, usize), actual: (usize, usize)) -> Result<()> {
    if expected != actual {
        return Err(Error::ShapeMismatch { expected, actual });
    }
    Ok(())
}

pub(crate) fn ensure_finite(data: &[f64]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite {
            index,
            value: data[index],
        }),
        None => Ok(()),
    }
}

/// Clamps every value into [0, 1].
///
/// Fails on the first non-finite value, naming its flat index.
pub fn clamp01(img: &ImageRGB) -> Result<ImageRGB> {
    img.ensure_finite()?;
    Ok(img.map(|v| v.clamp(0.0, 1.0)))
}

/// Scene distance per pixel, in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl DepthMap {
    /// Validates that every distance is finite and non-negative.
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::InvalidArgument(format!(
                "depth {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        ensure_finite(&data)?;
        if let Some(i) = data.iter().position(|&d| d < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "negative depth {} at flat index {i}",
                data[i]
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, meters: f64) -> Result<Self> {
        Self::new(height, width, vec![meters; height * width])
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &d| {
                (lo.min(d), hi.max(d))
            })
    }

    /// Linearly maps the value range onto `[lo, hi]`.
    ///
    /// A constant map is clamped into the interval instead.
    pub fn rescaled(&self, lo: f64, hi: f64) -> DepthMap {
        let (min, max) = self.min_max();
        let data = if max > min {
            let scale = (hi - lo) / (max - min);
            self.data.iter().map(|&d| lo + (d - min) * scale).collect()
        } else {
            self.data.iter().map(|&d| d.clamp(lo, hi)).collect()
        };
        DepthMap {
            height: self.height,
            width: self.width,
            data,
        }
    }

    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<DepthMap> {
        if top + h > self.height || left + w > self.width {
            return Err(Error::InvalidArgument(format!(
                "crop {h}x{w} at ({top},{left}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(h * w);
        for y in top..top + h {
            data.extend_from_slice(&self.data[y * self.width + left..y * self.width + left + w]);
        }
        Ok(DepthMap {
            height: h,
            width: w,
            data,
        })
    }
}
