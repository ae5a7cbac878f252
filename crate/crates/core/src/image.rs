//! Dense `3 × H × W` image tensors with values in `[0, 1]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of colour channels every [`Image`] carries.
pub const CHANNELS: usize = 3;

/// A channel-major (`C × H × W`) RGB image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    /// Builds an image from channel-major data, checking length and range.
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        if data.len() != CHANNELS * height * width {
            return Err(Error::invalid(format!(
                "image data has {} values, expected {}",
                data.len(),
                CHANNELS * height * width
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::invalid(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self { height, width, data })
    }

    /// Skips the range check. Callers must guarantee the invariants.
    pub(crate) fn from_raw(height: usize, width: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), CHANNELS * height * width);
        Self { height, width, data }
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; CHANNELS * height * width])
    }

    /// Builds an image from `f(channel, row, col)`; values are clamped to `[0, 1]`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(CHANNELS * height * width);
        for c in 0..CHANNELS {
            for i in 0..height {
                for j in 0..width {
                    let v = f(c, i, j);
                    data.push(if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
                }
            }
        }
        Self::from_raw(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        CHANNELS
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, i: usize, j: usize) -> f64 {
        self.data[(c * self.height + i) * self.width + j]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Mirrors the image left to right.
    pub fn flip_horizontal(&self) -> Image {
        let (h, w) = (self.height, self.width);
        let mut data = vec![0.0; self.data.len()];
        for c in 0..CHANNELS {
            for i in 0..h {
                let row = (c * h + i) * w;
                for j in 0..w {
                    data[row + j] = self.data[row + w - 1 - j];
                }
            }
        }
        Image::from_raw(h, w, data)
    }

    /// Converts to an 8-bit RGB buffer.
    pub fn to_rgb8(&self) -> ::image::RgbImage {
        let (h, w) = (self.height, self.width);
        ::image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |c| (self.get(c, y as usize, x as usize) * 255.0).round() as u8;
            ::image::Rgb([px(0), px(1), px(2)])
        })
    }

    /// Converts an 8-bit RGB buffer into an image scaled to `[0, 1]`.
    pub fn from_rgb8(buf: &::image::RgbImage) -> Image {
        let (w, h) = (buf.width() as usize, buf.height() as usize);
        Image::from_fn(h, w, |c, i, j| {
            f64::from(buf.get_pixel(j as u32, i as u32)[c]) / 255.0
        })
    }
}
