//! Image interchange: 8-bit PNG previews and the exact PSKF float format.
//!
//! PSKF is a little-endian flat binary with a 16-byte header:
//! magic "PSKF", u32 width, u32 height, u32 channels, then
//! width*height*channels f32 values in row-major order.

use super::image::ImageBuffer;
use crate::error::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

pub const PSKF_MAGIC: &[u8; 4] = b"PSKF";

pub fn write_pskf(img: &ImageBuffer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let name = path.display().to_string();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(&name, e))?;
    let mut buf = Vec::with_capacity(16 + img.data.len() * 4);
    buf.extend_from_slice(PSKF_MAGIC);
    buf.extend_from_slice(&(img.width as u32).to_le_bytes());
    buf.extend_from_slice(&(img.height as u32).to_le_bytes());
    buf.extend_from_slice(&(img.channels as u32).to_le_bytes());
    for &v in &img.data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    f.write_all(&buf).map_err(|e| Error::io(&name, e))
}

pub fn read_pskf(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    let name = path.display().to_string();
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(&name, e))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes).map_err(|e| Error::io(&name, e))?;
    if bytes.len() < 16 || &bytes[0..4] != PSKF_MAGIC {
        return Err(Error::Parse {
            path: name,
            line: 0,
            msg: "missing PSKF magic".into(),
        });
    }
    let rd_u32 = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
    let (width, height, channels) = (rd_u32(4), rd_u32(8), rd_u32(12));
    let n = width * height * channels;
    if bytes.len() != 16 + 4 * n {
        return Err(Error::Parse {
            path: name,
            line: 0,
            msg: format!("payload {} bytes, header implies {}", bytes.len() - 16, 4 * n),
        });
    }
    let mut img = ImageBuffer::new(width, height, channels);
    for (i, v) in img.data.iter_mut().enumerate() {
        let off = 16 + 4 * i;
        *v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64;
    }
    Ok(img)
}

/// Writes a flat f32 vector in PSKF layout (width = len, height = channels = 1).
pub fn write_pskf_vector(data: &[f64], path: impl AsRef<Path>) -> Result<()> {
    let img = ImageBuffer {
        width: data.len(),
        height: 1,
        channels: 1,
        data: data.to_vec(),
    };
    write_pskf(&img, path)
}

pub fn read_pskf_vector(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let img = read_pskf(path)?;
    Ok(img.data)
}

/// 8-bit PNG dump; 1-channel buffers become grayscale, 3-channel RGB.
pub fn write_png(img: &ImageBuffer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let name = path.display().to_string();
    let quant = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let result = match img.channels {
        1 => {
            let px: Vec<u8> = img.data.iter().map(|&v| quant(v)).collect();
            image::GrayImage::from_raw(img.width as u32, img.height as u32, px)
                .expect("sized buffer")
                .save(path)
        }
        3 => {
            let px: Vec<u8> = img.data.iter().map(|&v| quant(v)).collect();
            image::RgbImage::from_raw(img.width as u32, img.height as u32, px)
                .expect("sized buffer")
                .save(path)
        }
        n => {
            return Err(Error::ShapeMismatch(format!(
                "cannot write {n}-channel image as PNG"
            )))
        }
    };
    result.map_err(|e| Error::Parse {
        path: name,
        line: 0,
        msg: e.to_string(),
    })
}

pub fn read_png(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    let name = path.display().to_string();
    let dyn_img = image::open(path).map_err(|e| Error::Parse {
        path: name,
        line: 0,
        msg: e.to_string(),
    })?;
    let rgb = dyn_img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut img = ImageBuffer::new(w, h, 3);
    for (i, v) in rgb.as_raw().iter().enumerate() {
        img.data[i] = *v as f64 / 255.0;
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pskf_round_trip_is_exact_in_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("buf.pskf");
        let mut img = ImageBuffer::new(5, 4, 3);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i as f64 * 0.37).sin();
        }
        write_pskf(&img, &path).unwrap();
        let back = read_pskf(&path).unwrap();
        assert_eq!(back.width, 5);
        assert_eq!(back.height, 4);
        assert_eq!(back.channels, 3);
        for (a, b) in img.data.iter().zip(&back.data) {
            assert_eq!(*a as f32, *b as f32);
        }
    }

    #[test]
    fn png_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let mut img = ImageBuffer::new(8, 8, 3);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i % 256) as f64 / 255.0;
        }
        write_png(&img, &path).unwrap();
        let back = read_png(&path).unwrap();
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() < 0.5 / 255.0 + 1e-9);
        }
    }
}
