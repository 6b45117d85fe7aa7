//! Minimal float image containers plus PNG import/export.
//!
//! Continuous image coordinates place the center of pixel `(x, y)` at
//! `(x + 0.5, y + 0.5)`.

use std::path::Path;

use image::{ImageBuffer, Luma, Rgb, Rgba};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<[f32; 3]>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, fill: [f32; 3]) -> Self {
        Self {
            width,
            height,
            data: vec![fill; width * height],
        }
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> [f32; 3],
    ) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<[f32; 3]>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::dims("image pixels", width * height, data.len()));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[[f32; 3]] {
        &self.data
    }

    pub fn pixels_mut(&mut self) -> &mut [[f32; 3]] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: [f32; 3]) {
        self.data[y * self.width + x] = v;
    }

    /// Bilinear sample at a continuous position, or `None` outside the image
    /// area `[0, w] × [0, h]`. Neighbours beyond the border are clamped.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> Option<[f32; 3]> {
        if !(x >= 0.0 && y >= 0.0 && x <= self.width as f64 && y <= self.height as f64) {
            return None;
        }
        Some(bilinear(self.width, self.height, x, y, |i, j| {
            self.get(i, j)
        }))
    }

    pub fn to_gray(&self, index: usize) -> ImageFrame {
        ImageFrame {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
                .collect(),
            index,
        }
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::FileNotFound(path.to_path_buf()));
        }
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        Ok(Self {
            width: w as usize,
            height: h as usize,
            data: img
                .pixels()
                .map(|p| [p[0], p[1], p[2]].map(|c| c as f32 / 255.0))
                .collect(),
        })
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let img: ImageBuffer<Rgb<u8>, Vec<u8>> =
            ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
                Rgb(self.get(x as usize, y as usize).map(to_u8))
            });
        img.save(path)?;
        Ok(())
    }

    /// 8-bit RGBA with alpha 255 where `mask` is set and 0 elsewhere.
    pub fn save_png_with_mask(&self, path: impl AsRef<Path>, mask: &[bool]) -> Result<()> {
        if mask.len() != self.data.len() {
            return Err(Error::dims("mask", self.data.len(), mask.len()));
        }
        let img: ImageBuffer<Rgba<u8>, Vec<u8>> =
            ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
                let i = y as usize * self.width + x as usize;
                let [r, g, b] = self.data[i].map(to_u8);
                Rgba([r, g, b, if mask[i] { 255 } else { 0 }])
            });
        img.save(path)?;
        Ok(())
    }
}

pub(crate) fn to_u8(c: f32) -> u8 {
    (c.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[inline]
pub(crate) fn bilinear<T: Copy + Lerp>(
    width: usize,
    height: usize,
    x: f64,
    y: f64,
    get: impl Fn(usize, usize) -> T,
) -> T {
    let fx = x - 0.5;
    let fy = y - 0.5;
    let x0 = fx.floor();
    let y0 = fy.floor();
    let tx = (fx - x0) as f32;
    let ty = (fy - y0) as f32;
    let clamp = |v: f64, n: usize| (v.max(0.0) as usize).min(n - 1);
    let (xa, xb) = (clamp(x0, width), clamp(x0 + 1.0, width));
    let (ya, yb) = (clamp(y0, height), clamp(y0 + 1.0, height));
    let top = get(xa, ya).lerp(get(xb, ya), tx);
    let bottom = get(xa, yb).lerp(get(xb, yb), tx);
    top.lerp(bottom, ty)
}

pub(crate) trait Lerp {
    fn lerp(self, other: Self, t: f32) -> Self;
}

impl Lerp for f32 {
    #[inline]
    fn lerp(self, other: Self, t: f32) -> Self {
        self + (other - self) * t
    }
}

impl Lerp for [f32; 3] {
    #[inline]
    fn lerp(self, other: Self, t: f32) -> Self {
        [
            self[0].lerp(other[0], t),
            self[1].lerp(other[1], t),
            self[2].lerp(other[2], t),
        ]
    }
}

/// Grayscale intensity frame with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFrame {
    width: usize,
    height: usize,
    data: Vec<f32>,
    pub index: usize,
}

impl ImageFrame {
    pub fn new(width: usize, height: usize, data: Vec<f32>, index: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument("empty frame".into()));
        }
        if data.len() != width * height {
            return Err(Error::dims("frame pixels", width * height, data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite pixel".into()));
        }
        Ok(Self {
            width,
            height,
            data,
            index,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
            index: 0,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Pixel access with edge replication for out-of-range coordinates.
    #[inline]
    pub fn get_clamped(&self, x: i64, y: i64) -> f32 {
        let xi = x.clamp(0, self.width as i64 - 1) as usize;
        let yi = y.clamp(0, self.height as i64 - 1) as usize;
        self.data[yi * self.width + xi]
    }
}

/// 16-bit grayscale PNG of values in `[0, 1]`.
pub fn save_weight_png(
    path: impl AsRef<Path>,
    width: usize,
    height: usize,
    values: &[f32],
) -> Result<()> {
    if values.len() != width * height {
        return Err(Error::dims("weight map", width * height, values.len()));
    }
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_fn(width as u32, height as u32, |x, y| {
            let v = values[y as usize * width + x as usize];
            Luma([(v.clamp(0.0, 1.0) * 65535.0).round() as u16])
        });
    img.save(path)?;
    Ok(())
}
