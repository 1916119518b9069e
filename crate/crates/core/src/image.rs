//! Normalized floating-point image planes.
//!
//! Every value lives in `[0, 1]`. Storage is row-major, interleaved by
//! channel, so the value for `(x, y, c)` sits at `(y * width + x) * channels + c`.

use std::path::Path;

use image::{ImageBuffer, Rgb, Rgba};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LayerImage {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl LayerImage {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 3 && channels != 4 {
            return Err(Error::InvalidInput(format!(
                "channels must be 3 or 4, got {channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::Dimension(format!(
                "{width}x{height}x{channels} image needs {} values, got {}",
                width * height * channels,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("image value at index {i}")));
        }
        if let Some(i) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidInput(format!(
                "image value {} at index {i} outside [0, 1]",
                data[i]
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Builds an image from arbitrary values, clamping each into `[0, 1]`.
    /// Non-finite values are still rejected.
    pub fn from_clamped(width: usize, height: usize, channels: usize, mut data: Vec<f64>) -> Result<Self> {
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("image value at index {i}")));
        }
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        Self::new(width, height, channels, data)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(width, height, channels, vec![value; width * height * channels])
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Result<Self> {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.index(x, y, c)]
    }

    /// Sets one value, clamped into `[0, 1]`.
    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        let i = self.index(x, y, c);
        self.data[i] = v.clamp(0.0, 1.0);
    }

    pub fn same_extent(&self, other: &LayerImage) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn check_extent(&self, other: &LayerImage, what: &str) -> Result<()> {
        if self.same_extent(other) {
            Ok(())
        } else {
            Err(Error::Dimension(format!(
                "{what}: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )))
        }
    }

    pub fn alpha(&self) -> Option<AlphaMap> {
        if self.channels != 4 {
            return None;
        }
        let values = self.data.chunks_exact(4).map(|px| px[3]).collect();
        Some(AlphaMap {
            width: self.width,
            height: self.height,
            values,
        })
    }

    /// RGB part of the image (drops alpha if present).
    pub fn rgb(&self) -> LayerImage {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(self.channels)
            .flat_map(|px| px[..3].iter().copied())
            .collect();
        LayerImage {
            width: self.width,
            height: self.height,
            channels: 3,
            data,
        }
    }

    /// Attaches an alpha map to an RGB image.
    pub fn with_alpha(&self, alpha: &AlphaMap) -> Result<LayerImage> {
        if alpha.width != self.width || alpha.height != self.height {
            return Err(Error::Dimension("alpha map extent differs from image".into()));
        }
        let rgb = self.rgb();
        let mut data = Vec::with_capacity(self.pixel_count() * 4);
        for (px, a) in rgb.data.chunks_exact(3).zip(&alpha.values) {
            data.extend_from_slice(px);
            data.push(*a);
        }
        LayerImage::new(self.width, self.height, 4, data)
    }

    /// Rounds every value to the nearest 8-bit level (round half up) and
    /// returns the normalized result.
    pub fn quantized(&self) -> LayerImage {
        let data = self.data.iter().map(|&v| f64::from(to_u8(v)) / 255.0).collect();
        LayerImage {
            data,
            ..self.clone()
        }
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| to_u8(v)).collect()
    }

    pub fn from_u8(width: usize, height: usize, channels: usize, bytes: &[u8]) -> Result<Self> {
        let data = bytes.iter().map(|&b| f64::from(b) / 255.0).collect();
        Self::new(width, height, channels, data)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (w, h) = (self.width as u32, self.height as u32);
        let bytes = self.to_u8();
        let res = if self.channels == 4 {
            ImageBuffer::<Rgba<u8>, _>::from_raw(w, h, bytes)
                .expect("buffer length checked at construction")
                .save_with_format(path, image::ImageFormat::Png)
        } else {
            ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, bytes)
                .expect("buffer length checked at construction")
                .save_with_format(path, image::ImageFormat::Png)
        };
        res.map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Loads a PNG (or any format the `image` crate decodes) as RGB or RGBA,
    /// depending on `channels`.
    pub fn load(path: &Path, channels: usize) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_dynamic(&img, channels)
    }

    pub fn from_dynamic(img: &image::DynamicImage, channels: usize) -> Result<Self> {
        let (w, h) = (img.width() as usize, img.height() as usize);
        match channels {
            3 => Self::from_u8(w, h, 3, img.to_rgb8().as_raw()),
            4 => Self::from_u8(w, h, 4, img.to_rgba8().as_raw()),
            c => Err(Error::InvalidInput(format!("channels must be 3 or 4, got {c}"))),
        }
    }
}

/// 8-bit quantization with round-half-up.
#[inline]
pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlphaMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl AlphaMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::Dimension(format!(
                "alpha map {width}x{height} needs {} values, got {}",
                width * height,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite() || !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidInput("alpha values must be finite and in [0, 1]".into()));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// (min, mean, max) over all pixels.
    pub fn summary(&self) -> (f64, f64, f64) {
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        let mut sum = 0.0;
        for &v in &self.values {
            min = min.min(v);
            max = max.max(v);
            sum += v;
        }
        (min, sum / self.values.len().max(1) as f64, max)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let img = img.to_luma8();
        let values = img.as_raw().iter().map(|&b| f64::from(b) / 255.0).collect();
        Self::new(img.width() as usize, img.height() as usize, values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes_and_values() {
        assert!(LayerImage::new(2, 2, 2, vec![0.0; 8]).is_err());
        assert!(LayerImage::new(2, 2, 3, vec![0.0; 11]).is_err());
        assert!(matches!(
            LayerImage::new(1, 1, 3, vec![0.0, f64::NAN, 0.0]),
            Err(Error::NonFinite(_))
        ));
        assert!(LayerImage::new(1, 1, 3, vec![0.0, 1.5, 0.0]).is_err());
    }

    #[test]
    fn quantization_rounds_half_up() {
        assert_eq!(to_u8(0.5 / 255.0), 1);
        assert_eq!(to_u8(0.49 / 255.0), 0);
        assert_eq!(to_u8(1.0), 255);
        let img = LayerImage::new(1, 1, 3, vec![0.1, 0.5, 0.9]).unwrap();
        for (a, b) in img.data().iter().zip(img.quantized().data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn png_roundtrip_is_exact_after_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let data: Vec<f64> = (0..4 * 3 * 4).map(|i| (i as f64 * 7.0 % 256.0) / 255.0).collect();
        let img = LayerImage::new(4, 3, 4, data).unwrap();
        img.save_png(&path).unwrap();
        let back = LayerImage::load(&path, 4).unwrap();
        assert_eq!(back, img.quantized());
    }

    #[test]
    fn alpha_roundtrip_through_rgb() {
        let img = LayerImage::new(2, 1, 4, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]).unwrap();
        let alpha = img.alpha().unwrap();
        assert_eq!(alpha.values, vec![0.4, 0.8]);
        assert_eq!(img.rgb().with_alpha(&alpha).unwrap(), img);
    }
}
