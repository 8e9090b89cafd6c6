//! Raster containers shared by every stage of the pipeline.
//!
//! All grids are row-major with `(row, col)` addressing; images interleave
//! channels per pixel. Depth value `0.0` means "missing".

use crate::error::{Error, Result};

/// Multi-channel color raster with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageGrid {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        if data.len() != height * width * channels {
            return Err(Error::invalid(format!(
                "image data has {} values, expected {}",
                data.len(),
                height * width * channels
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("image contains non-finite values"));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for r in 0..height {
            for c in 0..width {
                for ch in 0..channels {
                    data.push(f(r, c, ch));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
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

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.width + col) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[(row * self.width + col) * self.channels + ch]
    }

    /// Rounds every value to the nearest `f32`, the precision used on disk.
    pub fn round_to_f32(&mut self) {
        round_slice(&mut self.data);
    }
}

/// Dense depth raster in meters; `0.0` encodes an invalid or missing sample.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthGrid {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl DepthGrid {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("depth dimensions must be positive"));
        }
        if data.len() != height * width {
            return Err(Error::invalid(format!(
                "depth data has {} values, expected {}",
                data.len(),
                height * width
            )));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid("depth must be finite and non-negative"));
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
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
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

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    /// Number of entries holding a valid (positive) depth.
    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|&&d| d > 0.0).count()
    }

    pub fn round_to_f32(&mut self) {
        round_slice(&mut self.data);
    }
}

/// Per-pixel validity flags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::invalid("mask length does not match dimensions"));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }
}

/// Scalar map with its own validity mask.
///
/// Used both for non-negative error maps (photometric residuals, weighted
/// residuals) and for SSIM score maps.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
    valid: Vec<bool>,
}

pub type ErrorMap = MaskedMap;

impl MaskedMap {
    /// Values at invalid entries are replaced by zero.
    pub fn new(height: usize, width: usize, values: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        if values.len() != height * width || valid.len() != height * width {
            return Err(Error::invalid("map length does not match dimensions"));
        }
        if values
            .iter()
            .zip(&valid)
            .any(|(v, &ok)| ok && !v.is_finite())
        {
            return Err(Error::invalid("valid map entries must be finite"));
        }
        Ok(Self::from_parts(height, width, values, valid))
    }

    pub(crate) fn from_parts(
        height: usize,
        width: usize,
        mut values: Vec<f64>,
        valid: Vec<bool>,
    ) -> Self {
        debug_assert_eq!(values.len(), height * width);
        debug_assert_eq!(valid.len(), height * width);
        for (v, &ok) in values.iter_mut().zip(&valid) {
            if !ok {
                *v = 0.0;
            }
        }
        Self {
            height,
            width,
            values,
            valid,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    /// Value at a flat index, `None` when invalid.
    pub fn at(&self, idx: usize) -> Option<f64> {
        self.valid[idx].then(|| self.values[idx])
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Mean over valid entries, summed in row-major order.
    pub fn mean(&self) -> Option<f64> {
        let mut sum = 0.0;
        let mut n = 0usize;
        for (v, &ok) in self.values.iter().zip(&self.valid) {
            if ok {
                sum += v;
                n += 1;
            }
        }
        (n > 0).then(|| sum / n as f64)
    }
}

fn round_slice(values: &mut [f64]) {
    for v in values {
        *v = *v as f32 as f64;
    }
}
