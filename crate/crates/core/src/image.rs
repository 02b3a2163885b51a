//! RGB images with floating point intensities.

use serde::{Deserialize, Serialize};

use crate::error::ImageError;

/// Smallest side length accepted by [`Image::new`].
pub const MIN_SIDE: u32 = 8;

pub const CHANNELS: usize = 3;

/// An RGB image with per-channel intensities in `[0, 1]`, stored row-major
/// and channel-interleaved.
///
/// Processing stays in `f64`; the image is quantized to 8 bits only when it
/// crosses a codec boundary (see [`Image::to_rgb8`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    width: u32,
    height: u32,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: u32, height: u32, data: Vec<f64>) -> Result<Self, ImageError> {
        if width < MIN_SIDE || height < MIN_SIDE {
            return Err(ImageError::TooSmall { width, height });
        }
        Self::with_min_side(width, height, data)
    }

    /// Constructor for operation outputs, which may legitimately fall below
    /// [`MIN_SIDE`] (e.g. scaling a tiny image).
    pub(crate) fn with_min_side(width: u32, height: u32, data: Vec<f64>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::TooSmall { width, height });
        }
        let expected = width as usize * height as usize * CHANNELS;
        if data.len() != expected {
            return Err(ImageError::BufferLength { expected, actual: data.len() });
        }
        if let Some(pos) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(ImageError::IntensityOutOfRange { index: pos, value: data[pos] });
        }
        Ok(Self { width, height, data })
    }

    /// Internal constructor; callers guarantee shape and range.
    pub(crate) fn from_parts(width: u32, height: u32, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), width as usize * height as usize * CHANNELS);
        Self { width, height, data }
    }

    pub fn filled(width: u32, height: u32, rgb: [f64; 3]) -> Result<Self, ImageError> {
        let data = (0..width as usize * height as usize)
            .flat_map(|_| rgb)
            .collect();
        Self::new(width, height, data)
    }

    pub fn from_rgb8(width: u32, height: u32, bytes: &[u8]) -> Result<Self, ImageError> {
        let data = bytes.iter().map(|&b| f64::from(b) / 255.0).collect();
        Self::with_min_side(width, height, data)
    }

    /// 8-bit view, rounding to the nearest level.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32, c: usize) -> f64 {
        self.data[(y as usize * self.width as usize + x as usize) * CHANNELS + c]
    }

    /// Returns a copy of this image with `f` applied to every intensity and
    /// the result clipped to `[0, 1]`.
    pub fn map_clipped(&self, mut f: impl FnMut(usize, f64) -> f64) -> Image {
        let data = self
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| f(i, v).clamp(0.0, 1.0))
            .collect();
        Image::from_parts(self.width, self.height, data)
    }

    pub fn mean_intensity(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

/// Peak signal-to-noise ratio in dB for unit-range intensities. Identical
/// images yield `f64::INFINITY`.
pub fn psnr(a: &Image, b: &Image) -> f64 {
    assert_eq!(a.dims(), b.dims(), "psnr needs equal dimensions");
    let mse = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_small_and_out_of_range() {
        assert!(matches!(
            Image::filled(4, 16, [0.0; 3]),
            Err(ImageError::TooSmall { .. })
        ));
        let mut data = vec![0.5; 8 * 8 * 3];
        data[7] = 1.5;
        assert!(matches!(
            Image::new(8, 8, data),
            Err(ImageError::IntensityOutOfRange { index: 7, .. })
        ));
        assert!(matches!(
            Image::new(8, 8, vec![0.0; 10]),
            Err(ImageError::BufferLength { .. })
        ));
    }

    #[test]
    fn rgb8_roundtrip_is_exact_on_levels() {
        let bytes: Vec<u8> = (0..8 * 8 * 3).map(|i| (i * 7 % 256) as u8).collect();
        let img = Image::from_rgb8(8, 8, &bytes).unwrap();
        assert_eq!(img.to_rgb8(), bytes);
    }

    #[test]
    fn psnr_of_identical_is_infinite() {
        let img = Image::filled(8, 8, [0.2, 0.4, 0.6]).unwrap();
        assert!(psnr(&img, &img).is_infinite());
    }
}
