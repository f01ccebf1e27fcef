//! Row-major float image buffer used across the crate.

use crate::error::{Error, Result};

/// H x W raster with 1 (silhouette/depth) or 3 (color) channels.
/// Color and silhouette values live in [0,1]; depth is meters with 0 = no hit.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.idx(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        let i = self.idx(x, y, c);
        self.data[i] = v;
    }

    pub fn same_shape(&self, other: &ImageBuffer) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn expect_shape(&self, other: &ImageBuffer, what: &str) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::ShapeMismatch(format!(
                "{what}: {}x{}x{} vs {}x{}x{}",
                self.width, self.height, self.channels, other.width, other.height, other.channels
            )));
        }
        Ok(())
    }

    /// Per-pixel multiply by a 1-channel mask.
    pub fn mul_mask(&self, mask: &ImageBuffer) -> Result<ImageBuffer> {
        if mask.channels != 1 || mask.width != self.width || mask.height != self.height {
            return Err(Error::ShapeMismatch(format!(
                "mask {}x{}x{} for image {}x{}x{}",
                mask.width, mask.height, mask.channels, self.width, self.height, self.channels
            )));
        }
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                let m = mask.get(x, y, 0);
                for c in 0..self.channels {
                    let i = out.idx(x, y, c);
                    out.data[i] *= m;
                }
            }
        }
        Ok(out)
    }

    /// Bilinear sample at continuous pixel coordinates (pixel centers at
    /// integer + 0.5), edge-clamped.
    pub fn sample_bilinear(&self, u: f64, v: f64, c: usize) -> f64 {
        let x = u - 0.5;
        let y = v - 0.5;
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let clamp_x = |i: i64| i.clamp(0, self.width as i64 - 1) as usize;
        let clamp_y = |i: i64| i.clamp(0, self.height as i64 - 1) as usize;
        let (x0i, x1i) = (clamp_x(x0 as i64), clamp_x(x0 as i64 + 1));
        let (y0i, y1i) = (clamp_y(y0 as i64), clamp_y(y0 as i64 + 1));
        let v00 = self.get(x0i, y0i, c);
        let v10 = self.get(x1i, y0i, c);
        let v01 = self.get(x0i, y1i, c);
        let v11 = self.get(x1i, y1i, c);
        v00 * (1.0 - fx) * (1.0 - fy) + v10 * fx * (1.0 - fy) + v01 * (1.0 - fx) * fy + v11 * fx * fy
    }

    /// Resamples a square window (origin `ox, oy`, side `side` in source
    /// pixels) to `out` x `out` via bilinear interpolation. Out-of-bounds
    /// reads clamp to the image edge.
    pub fn resample_window(&self, ox: f64, oy: f64, side: f64, out: usize) -> ImageBuffer {
        let mut dst = ImageBuffer::new(out, out, self.channels);
        let step = side / out as f64;
        for y in 0..out {
            for x in 0..out {
                let u = ox + (x as f64 + 0.5) * step;
                let v = oy + (y as f64 + 0.5) * step;
                for c in 0..self.channels {
                    let val = self.sample_bilinear(u, v, c);
                    dst.set(x, y, c, val);
                }
            }
        }
        dst
    }

    /// 2x2 average-pool downsample, truncating odd tails.
    pub fn downsample2(&self) -> ImageBuffer {
        let w = (self.width / 2).max(1);
        let h = (self.height / 2).max(1);
        let mut out = ImageBuffer::new(w, h, self.channels);
        for y in 0..h {
            for x in 0..w {
                for c in 0..self.channels {
                    let mut s = 0.0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let sx = (2 * x + dx).min(self.width - 1);
                            let sy = (2 * y + dy).min(self.height - 1);
                            s += self.get(sx, sy, c);
                        }
                    }
                    out.set(x, y, c, s / 4.0);
                }
            }
        }
        out
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Separable Gaussian blur with replicate padding. `sigma <= 0` is identity.
    pub fn gaussian_blur(&self, sigma: f64) -> ImageBuffer {
        if sigma <= 0.0 {
            return self.clone();
        }
        let radius = (3.0 * sigma).ceil() as i64;
        let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
        let mut sum = 0.0;
        for i in -radius..=radius {
            let w = (-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp();
            kernel.push(w);
            sum += w;
        }
        for w in &mut kernel {
            *w /= sum;
        }
        let mut tmp = ImageBuffer::new(self.width, self.height, self.channels);
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    let mut acc = 0.0;
                    for (ki, w) in kernel.iter().enumerate() {
                        let sx = (x as i64 + ki as i64 - radius).clamp(0, self.width as i64 - 1);
                        acc += w * self.get(sx as usize, y, c);
                    }
                    tmp.set(x, y, c, acc);
                }
            }
        }
        let mut out = ImageBuffer::new(self.width, self.height, self.channels);
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    let mut acc = 0.0;
                    for (ki, w) in kernel.iter().enumerate() {
                        let sy = (y as i64 + ki as i64 - radius).clamp(0, self.height as i64 - 1);
                        acc += w * tmp.get(x, sy as usize, c);
                    }
                    out.set(x, y, c, acc);
                }
            }
        }
        out
    }

    /// Quantizes through 8-bit and back, mirroring a PNG round trip.
    pub fn quantize8(&self) -> ImageBuffer {
        let mut out = self.clone();
        for v in &mut out.data {
            let q = (v.clamp(0.0, 1.0) * 255.0).round();
            *v = q / 255.0;
        }
        out
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}
