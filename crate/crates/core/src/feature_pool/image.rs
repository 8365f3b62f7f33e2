use std::path::Path;

use serde::{Deserialize, Serialize};

use super::PoolError;
use crate::geometry::PixelBox;

/// Interleaved 8-bit RGB pixels, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelGrid {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u8>,
}

impl PixelGrid {
    pub const CHANNELS: usize = 3;

    pub fn new(width: u32, height: u32, data: Vec<u8>) -> Result<Self, PoolError> {
        let expected = width as usize * height as usize * Self::CHANNELS;
        if data.len() != expected {
            return Err(PoolError::ImageSize(format!(
                "{}x{} RGB needs {expected} bytes, got {}",
                width,
                height,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Self {
        let data = rgb
            .iter()
            .copied()
            .cycle()
            .take(width as usize * height as usize * Self::CHANNELS)
            .collect();
        Self {
            width,
            height,
            data,
        }
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width as usize * height as usize * Self::CHANNELS);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    /// Decodes a PNG or PPM file.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, PoolError> {
        let img = image::open(path.as_ref())
            .map_err(|e| PoolError::Image(format!("{}: {e}", path.as_ref().display())))?
            .into_rgb8();
        let (width, height) = img.dimensions();
        Ok(Self {
            width,
            height,
            data: img.into_raw(),
        })
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * Self::CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Copies the `w x h` window at `(x0, y0)`; the window must fit.
    pub fn crop(&self, x0: u32, y0: u32, w: u32, h: u32) -> PixelGrid {
        debug_assert!(x0 + w <= self.width && y0 + h <= self.height);
        let mut data = Vec::with_capacity(w as usize * h as usize * Self::CHANNELS);
        for y in y0..y0 + h {
            let start = (y as usize * self.width as usize + x0 as usize) * Self::CHANNELS;
            data.extend_from_slice(&self.data[start..start + w as usize * Self::CHANNELS]);
        }
        PixelGrid {
            width: w,
            height: h,
            data,
        }
    }

    /// Crops the pixels covered by a continuous box, widening fractional
    /// edges outward. Returns `None` when the covered window is empty.
    pub fn crop_box(&self, bbox: &PixelBox) -> Option<PixelGrid> {
        let x0 = bbox.x1.floor().clamp(0.0, self.width as f64) as u32;
        let y0 = bbox.y1.floor().clamp(0.0, self.height as f64) as u32;
        let x1 = bbox.x2.ceil().clamp(0.0, self.width as f64) as u32;
        let y1 = bbox.y2.ceil().clamp(0.0, self.height as f64) as u32;
        if x1 <= x0 || y1 <= y0 {
            return None;
        }
        Some(self.crop(x0, y0, x1 - x0, y1 - y0))
    }

    /// Area-average resampling; upsampled axes fall back to the nearest
    /// source pixel.
    pub fn resize(&self, width: u32, height: u32) -> PixelGrid {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let span = |o: u32, out: u32, src: u32| {
            let a = (o as u64 * src as u64 / out as u64) as u32;
            let b = ((o as u64 + 1) * src as u64).div_ceil(out as u64) as u32;
            (a.min(src - 1), b.max(a + 1).min(src))
        };
        let mut data = Vec::with_capacity(width as usize * height as usize * Self::CHANNELS);
        for oy in 0..height {
            let (y0, y1) = span(oy, height, self.height);
            for ox in 0..width {
                let (x0, x1) = span(ox, width, self.width);
                let mut acc = [0u64; 3];
                for y in y0..y1 {
                    for x in x0..x1 {
                        let p = self.pixel(x, y);
                        for k in 0..3 {
                            acc[k] += p[k] as u64;
                        }
                    }
                }
                let n = ((y1 - y0) * (x1 - x0)) as u64;
                for a in acc {
                    data.push(((a + n / 2) / n) as u8);
                }
            }
        }
        PixelGrid {
            width,
            height,
            data,
        }
    }

    /// Binary PPM (P6) encoding, used as the image payload for judges.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }
}
