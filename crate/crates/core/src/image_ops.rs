//! Host-side image buffers and the geometric/photometric operations used by
//! multi-crop augmentation, indexing and overlay rendering.

use std::path::Path;

use candle_core::{Device, Tensor};
use image::{DynamicImage, RgbImage};

use crate::error::{Error, Result};

/// Planar `C×H×W` image with values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

/// Axis-aligned crop box in source pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CropBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageTensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Self::zeros(3, h, w);
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                out.data[c * h * w + y as usize * w + x as usize] = px.0[c] as f32 / 255.0;
            }
        }
        out
    }

    pub fn from_dynamic(img: &DynamicImage) -> Self {
        Self::from_rgb8(&img.to_rgb8())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)?;
        Ok(Self::from_dynamic(&img))
    }

    /// Quantizes to 8-bit RGB; single-channel images are replicated.
    pub fn to_rgb8(&self) -> RgbImage {
        let (h, w) = (self.height, self.width);
        RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let mut px = [0u8; 3];
            for (c, p) in px.iter_mut().enumerate() {
                let src = c.min(self.channels - 1);
                let v = self.data[src * h * w + y as usize * w + x as usize];
                *p = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
            image::Rgb(px)
        })
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f32 {
        &mut self.data[(c * self.height + y) * self.width + x]
    }

    pub fn crop(&self, b: CropBox) -> Result<Self> {
        if b.height == 0
            || b.width == 0
            || b.top + b.height > self.height
            || b.left + b.width > self.width
        {
            return Err(Error::InvalidArgument(format!(
                "crop {b:?} outside {}x{} image",
                self.height, self.width
            )));
        }
        let mut out = Self::zeros(self.channels, b.height, b.width);
        for c in 0..self.channels {
            for y in 0..b.height {
                for x in 0..b.width {
                    *out.at_mut(c, y, x) = self.at(c, b.top + y, b.left + x);
                }
            }
        }
        Ok(out)
    }

    /// Bilinear resize with half-pixel centres (edge-clamped).
    pub fn resize(&self, height: usize, width: usize) -> Self {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let mut out = Self::zeros(self.channels, height, width);
        let sy = self.height as f32 / height as f32;
        let sx = self.width as f32 / width as f32;
        for y in 0..height {
            let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f32);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = fy - y0 as f32;
            for x in 0..width {
                let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f32);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = fx - x0 as f32;
                for c in 0..self.channels {
                    let top = self.at(c, y0, x0) * (1.0 - wx) + self.at(c, y0, x1) * wx;
                    let bot = self.at(c, y1, x0) * (1.0 - wx) + self.at(c, y1, x1) * wx;
                    *out.at_mut(c, y, x) = top * (1.0 - wy) + bot * wy;
                }
            }
        }
        out
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for c in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    *out.at_mut(c, y, x) = self.at(c, y, self.width - 1 - x);
                }
            }
        }
        out
    }

    /// Separable Gaussian blur, kernel radius `ceil(3 sigma)`.
    pub fn gaussian_blur(&self, sigma: f32) -> Self {
        if sigma <= 0.0 {
            return self.clone();
        }
        let radius = (3.0 * sigma).ceil() as isize;
        let kernel: Vec<f32> = (-radius..=radius)
            .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
            .collect();
        let norm: f32 = kernel.iter().sum();
        let kernel: Vec<f32> = kernel.iter().map(|k| k / norm).collect();
        let (h, w) = (self.height as isize, self.width as isize);
        let mut tmp = self.clone();
        for c in 0..self.channels {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for (j, k) in kernel.iter().enumerate() {
                        let xx = (x + j as isize - radius).clamp(0, w - 1);
                        acc += k * self.at(c, y as usize, xx as usize);
                    }
                    *tmp.at_mut(c, y as usize, x as usize) = acc;
                }
            }
        }
        let mut out = tmp.clone();
        for c in 0..self.channels {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for (j, k) in kernel.iter().enumerate() {
                        let yy = (y + j as isize - radius).clamp(0, h - 1);
                        acc += k * tmp.at(c, yy as usize, x as usize);
                    }
                    *out.at_mut(c, y as usize, x as usize) = acc;
                }
            }
        }
        out
    }

    /// Luma-weighted grayscale value per pixel (RGB) or the single channel.
    fn luma(&self) -> Vec<f32> {
        let hw = self.height * self.width;
        if self.channels < 3 {
            return self.data[..hw].to_vec();
        }
        (0..hw)
            .map(|i| 0.299 * self.data[i] + 0.587 * self.data[hw + i] + 0.114 * self.data[2 * hw + i])
            .collect()
    }

    /// Brightness, contrast and saturation scaling, applied in that order.
    pub fn color_jitter(&self, brightness: f32, contrast: f32, saturation: f32) -> Self {
        let mut out = self.clone();
        for v in out.data.iter_mut() {
            *v = (*v * brightness).clamp(0.0, 1.0);
        }
        let luma = out.luma();
        let mean = luma.iter().sum::<f32>() / luma.len().max(1) as f32;
        for v in out.data.iter_mut() {
            *v = ((*v - mean) * contrast + mean).clamp(0.0, 1.0);
        }
        if out.channels >= 3 {
            let luma = out.luma();
            let hw = out.height * out.width;
            for c in 0..3 {
                for (i, l) in luma.iter().enumerate() {
                    let v = &mut out.data[c * hw + i];
                    *v = ((*v - l) * saturation + l).clamp(0.0, 1.0);
                }
            }
        }
        out
    }

    pub fn solarize(&self, threshold: f32) -> Self {
        let mut out = self.clone();
        for v in out.data.iter_mut() {
            if *v >= threshold {
                *v = 1.0 - *v;
            }
        }
        out
    }

    /// Per-channel `(x - mean) / std`.
    pub fn normalized(&self, mean: &[f32], std: &[f32]) -> Self {
        let hw = self.height * self.width;
        let mut out = self.clone();
        for c in 0..self.channels {
            let (m, s) = (mean[c % mean.len()], std[c % std.len()]);
            for v in &mut out.data[c * hw..(c + 1) * hw] {
                *v = (*v - m) / s;
            }
        }
        out
    }
}

/// Stacks equally shaped images into a `B×C×H×W` tensor.
pub fn stack_images(images: &[ImageTensor]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("cannot stack zero images".into()))?;
    let (c, h, w) = (first.channels, first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        if (img.channels, img.height, img.width) != (c, h, w) {
            return Err(Error::mismatch(
                "stack_images",
                format!("{c}x{h}x{w}"),
                format!("{}x{}x{}", img.channels, img.height, img.width),
            ));
        }
        data.extend_from_slice(&img.data);
    }
    Ok(Tensor::from_vec(data, (images.len(), c, h, w), &Device::Cpu)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> ImageTensor {
        let mut img = ImageTensor::zeros(3, h, w);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    *img.at_mut(c, y, x) = (y * w + x) as f32 / (h * w) as f32;
                }
            }
        }
        img
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = ramp(8, 8);
        assert_eq!(img.resize(8, 8), img);
        let mut flat = ImageTensor::zeros(3, 5, 7);
        flat.data.iter_mut().for_each(|v| *v = 0.25);
        let up = flat.resize(13, 11);
        assert!(up.data.iter().all(|v| (v - 0.25).abs() < 1e-6));
    }

    #[test]
    fn flip_twice_is_identity() {
        let img = ramp(4, 6);
        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
        assert_eq!(img.flip_horizontal().at(0, 0, 0), img.at(0, 0, 5));
    }

    #[test]
    fn crop_bounds_are_checked() {
        let img = ramp(4, 4);
        let ok = img
            .crop(CropBox { top: 1, left: 2, height: 2, width: 2 })
            .unwrap();
        assert_eq!(ok.at(0, 0, 0), img.at(0, 1, 2));
        assert!(img.crop(CropBox { top: 3, left: 0, height: 2, width: 1 }).is_err());
    }

    #[test]
    fn blur_preserves_constant_image() {
        let mut flat = ImageTensor::zeros(3, 6, 6);
        flat.data.iter_mut().for_each(|v| *v = 0.6);
        let b = flat.gaussian_blur(1.5);
        assert!(b.data.iter().all(|v| (v - 0.6).abs() < 1e-5));
    }

    #[test]
    fn rgb8_round_trip() {
        let img = ramp(3, 5);
        let back = ImageTensor::from_rgb8(&img.to_rgb8());
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }
}
