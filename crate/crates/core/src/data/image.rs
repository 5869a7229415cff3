//! Grayscale images as `f32` grids in `[0, 1]`.

use std::path::Path;

use image::{ImageBuffer, Luma};

use crate::error::{Error, Result};

/// A row-major grayscale image.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(Error::Data(format!(
                "{width}×{height} image cannot hold {} pixels",
                data.len()
            )));
        }
        Ok(GrayImage { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        GrayImage {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    /// Bilinear sample at continuous pixel coordinates; outside the grid
    /// every tap reads zero.
    pub fn sample(&self, x: f64, y: f64) -> f32 {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let tap = |xi: f64, yi: f64| -> f64 {
            if xi < 0.0 || yi < 0.0 || xi >= self.width as f64 || yi >= self.height as f64 {
                0.0
            } else {
                f64::from(self.get(xi as usize, yi as usize))
            }
        };
        let top = tap(x0, y0) * (1.0 - fx) + tap(x0 + 1.0, y0) * fx;
        let bottom = tap(x0, y0 + 1.0) * (1.0 - fx) + tap(x0 + 1.0, y0 + 1.0) * fx;
        (top * (1.0 - fy) + bottom * fy) as f32
    }

    /// Bilinear resize with half-pixel centers and edge clamping.
    pub fn resize(&self, width: usize, height: usize) -> GrayImage {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let clamp = |v: f64, n: usize| v.clamp(0.0, (n - 1) as f64);
        let mut out = Vec::with_capacity(width * height);
        for y in 0..height {
            let fy = clamp((y as f64 + 0.5) * sy - 0.5, self.height);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = fy - y0 as f64;
            for x in 0..width {
                let fx = clamp((x as f64 + 0.5) * sx - 0.5, self.width);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = fx - x0 as f64;
                let p = |xx, yy| f64::from(self.get(xx, yy));
                let top = p(x0, y0) * (1.0 - wx) + p(x1, y0) * wx;
                let bottom = p(x0, y1) * (1.0 - wx) + p(x1, y1) * wx;
                out.push((top * (1.0 - wy) + bottom * wy) as f32);
            }
        }
        GrayImage {
            width,
            height,
            data: out,
        }
    }

    /// Loads an 8- or 16-bit grayscale PNG or PGM, scaled to `[0, 1]`.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data = match img {
            image::DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(|v| f32::from(v) / 255.0).collect(),
            other => other.into_luma16().into_raw().into_iter().map(|v| f32::from(v) / 65535.0).collect(),
        };
        GrayImage::new(w, h, data)
    }

    /// 8-bit quantization, clamping to `[0, 1]`.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    /// Writes an 8-bit grayscale PNG (or PGM when the extension is `pgm`).
    pub fn save(&self, path: &Path) -> Result<()> {
        let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, self.to_u8()).expect("buffer size");
        buf.save(path)?;
        Ok(())
    }

    /// Writes a 16-bit grayscale PNG.
    pub fn save16(&self, path: &Path) -> Result<()> {
        let raw = self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16).collect();
        let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, raw).expect("buffer size");
        buf.save(path)?;
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| f64::from(v)).sum::<f64>() / self.data.len() as f64
    }
}
