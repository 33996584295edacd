//! Calibrated 2D rasters: images, binary masks and distance fields.
//!
//! Pixel coordinates follow the index convention: pixel `(row, col)` has its
//! centre at `(x = col, y = row)`. Physical spacing is isotropic and carried
//! alongside the pixels; it is never inferred from file metadata.

mod edt;
pub mod io;
mod morphology;
mod sample;

pub use edt::{edt, squared_edt_px};
pub use morphology::{boundary, connected_components, dilate_mm, fill_holes, Connectivity, Labels};
pub(crate) use sample::warp_with_inverse;
pub use sample::{bilinear_sample, bilinear_sample_with_fill, warp};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RasterError {
    #[error("data length {got} does not match {height}x{width}x{channels}")]
    BadLength {
        height: usize,
        width: usize,
        channels: usize,
        got: usize,
    },
    #[error("unsupported channel count {0} (expected 1 or 3)")]
    BadChannels(usize),
    #[error("non-finite pixel value at index {0}")]
    NonFinite(usize),
    #[error("invalid spacing {0} mm/px")]
    BadSpacing(f64),
    #[error("mask has no spacing; calibrate it first")]
    UncalibratedMask,
    #[error("transform is not invertible (|det| = {0:e})")]
    NonInvertibleTransform(f64),
    #[error("output dimensions must be positive, got {0}x{1}")]
    EmptyOutput(usize, usize),
    #[error("dimension mismatch: {0:?} vs {1:?}")]
    DimensionMismatch((usize, usize), (usize, usize)),
}

fn check_spacing(spacing: Option<f64>) -> Result<(), RasterError> {
    match spacing {
        Some(s) if !(s.is_finite() && s > 0.0) => Err(RasterError::BadSpacing(s)),
        _ => Ok(()),
    }
}

/// A planar (channel-major, then row-major) image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
    spacing: Option<f64>,
}

impl RasterImage {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f64>,
        spacing: Option<f64>,
    ) -> Result<Self, RasterError> {
        if channels != 1 && channels != 3 {
            return Err(RasterError::BadChannels(channels));
        }
        if data.len() != height * width * channels {
            return Err(RasterError::BadLength {
                height,
                width,
                channels,
                got: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(RasterError::NonFinite(i));
        }
        check_spacing(spacing)?;
        Ok(Self {
            height,
            width,
            channels,
            data,
            spacing,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64, spacing: Option<f64>) -> Self {
        Self::new(height, width, channels, vec![value; height * width * channels], spacing)
            .expect("filled image with valid parameters")
    }

    /// Builds an image by evaluating `f(channel, row, col)` for every sample.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        spacing: Option<f64>,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self, RasterError> {
        let mut data = Vec::with_capacity(height * width * channels);
        for c in 0..channels {
            for r in 0..height {
                for col in 0..width {
                    data.push(f(c, r, col));
                }
            }
        }
        Self::new(height, width, channels, data, spacing)
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

    pub fn spacing(&self) -> Option<f64> {
        self.spacing
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn plane(&self, channel: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[channel * n..(channel + 1) * n]
    }

    pub fn get(&self, channel: usize, row: usize, col: usize) -> f64 {
        self.data[(channel * self.height + row) * self.width + col]
    }

    pub fn with_spacing(mut self, spacing: Option<f64>) -> Result<Self, RasterError> {
        check_spacing(spacing)?;
        self.spacing = spacing;
        Ok(self)
    }

    /// Rec. 601 luma for RGB images; a copy of the plane for grayscale ones.
    pub fn luminance(&self) -> RasterImage {
        if self.channels == 1 {
            return self.clone();
        }
        let n = self.height * self.width;
        let data = (0..n)
            .map(|i| 0.299 * self.data[i] + 0.587 * self.data[n + i] + 0.114 * self.data[2 * n + i])
            .collect();
        RasterImage {
            height: self.height,
            width: self.width,
            channels: 1,
            data,
            spacing: self.spacing,
        }
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
}

/// One bit per pixel, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
    spacing: Option<OrderedSpacing>,
}

// f64 is not Eq; masks compare spacing bit-for-bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct OrderedSpacing(u64);

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>, spacing: Option<f64>) -> Result<Self, RasterError> {
        if bits.len() != height * width {
            return Err(RasterError::BadLength {
                height,
                width,
                channels: 1,
                got: bits.len(),
            });
        }
        check_spacing(spacing)?;
        Ok(Self {
            height,
            width,
            bits,
            spacing: spacing.map(|s| OrderedSpacing(s.to_bits())),
        })
    }

    pub fn empty(height: usize, width: usize, spacing: Option<f64>) -> Self {
        Self::new(height, width, vec![false; height * width], spacing).expect("valid empty mask")
    }

    pub fn full(height: usize, width: usize, spacing: Option<f64>) -> Self {
        Self::new(height, width, vec![true; height * width], spacing).expect("valid full mask")
    }

    pub fn from_fn(height: usize, width: usize, spacing: Option<f64>, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                bits.push(f(r, c));
            }
        }
        Self::new(height, width, bits, spacing).expect("valid mask from closure")
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

    pub fn spacing(&self) -> Option<f64> {
        self.spacing.map(|s| f64::from_bits(s.0))
    }

    pub fn with_spacing(mut self, spacing: Option<f64>) -> Result<Self, RasterError> {
        check_spacing(spacing)?;
        self.spacing = spacing.map(|s| OrderedSpacing(s.to_bits()));
        Ok(self)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.bits[row * self.width + col] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    fn zip_with(&self, other: &BinaryMask, f: impl Fn(bool, bool) -> bool) -> Result<BinaryMask, RasterError> {
        if self.dims() != other.dims() {
            return Err(RasterError::DimensionMismatch(self.dims(), other.dims()));
        }
        let bits = self.bits.iter().zip(&other.bits).map(|(&a, &b)| f(a, b)).collect();
        Ok(BinaryMask {
            height: self.height,
            width: self.width,
            bits,
            spacing: self.spacing,
        })
    }

    pub fn and(&self, other: &BinaryMask) -> Result<BinaryMask, RasterError> {
        self.zip_with(other, |a, b| a && b)
    }

    pub fn or(&self, other: &BinaryMask) -> Result<BinaryMask, RasterError> {
        self.zip_with(other, |a, b| a || b)
    }

    pub fn and_not(&self, other: &BinaryMask) -> Result<BinaryMask, RasterError> {
        self.zip_with(other, |a, b| a && !b)
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.dims() == other.dims() && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }
}

/// Per-pixel distance to the nearest source pixel, in mm when the source mask
/// was calibrated and in pixels otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceField {
    height: usize,
    width: usize,
    values: Vec<f64>,
    spacing: Option<f64>,
}

impl DistanceField {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn spacing(&self) -> Option<f64> {
        self.spacing
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }
}
