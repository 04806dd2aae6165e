//! Plain f32 rasters used at the data boundary: RGB images in HWC order and
//! single-channel maps. Everything the networks see goes through these types
//! before it is packed into tensors.

use std::path::Path;

use image::imageops::FilterType;
use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage as U8Rgb};

use crate::error::{Error, Result};

/// Fixed resize filter for ingestion (bilinear / triangle).
pub const RESIZE_FILTER: FilterType = FilterType::Triangle;

/// Luma weights used for every RGB to gray conversion.
pub const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

/// RGB image, HWC layout, values nominally in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

/// Single-channel map, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(y, x));
            }
        }
        Self { height, width, data }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, px: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&px);
    }

    pub fn to_gray(&self) -> GrayMap {
        let data = self
            .data
            .chunks_exact(3)
            .map(|p| LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2])
            .collect();
        GrayMap {
            height: self.height,
            width: self.width,
            data,
        }
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn to_u8(&self) -> U8Rgb {
        let buf = self.data.iter().map(|&v| quantize(v)).collect();
        ImageBuffer::from_raw(self.width as u32, self.height as u32, buf)
            .expect("buffer length matches dimensions")
    }

    pub fn from_u8(img: &U8Rgb) -> Self {
        Self {
            height: img.height() as usize,
            width: img.width() as usize,
            data: img.as_raw().iter().map(|&v| v as f32 / 255.0).collect(),
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        save_image(&self.to_u8(), path)
    }

    /// Loads an image and bilinearly resizes it to `size`×`size` when needed.
    pub fn load_png(path: &Path, size: usize) -> Result<Self> {
        let img = image::open(path).map_err(|e| image_error(path, e))?.to_rgb8();
        let img = if img.width() as usize != size || img.height() as usize != size {
            image::imageops::resize(&img, size as u32, size as u32, RESIZE_FILTER)
        } else {
            img
        };
        Ok(Self::from_u8(&img))
    }
}

impl GrayMap {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self { height, width, data }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn is_all_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    pub fn mean_abs(&self) -> f32 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|v| v.abs()).sum::<f32>() / self.data.len() as f32
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    /// Block-average down to `out`×`out`; `out` must divide both sides.
    pub fn avg_pool_to(&self, out: usize) -> Result<Self> {
        if out == 0 || !self.height.is_multiple_of(out) || !self.width.is_multiple_of(out) {
            return Err(Error::Shape(format!(
                "pool target {out} does not divide {}x{}",
                self.height, self.width
            )));
        }
        let (bh, bw) = (self.height / out, self.width / out);
        let norm = (bh * bw) as f32;
        Ok(Self::from_fn(out, out, |oy, ox| {
            let mut acc = 0.0;
            for y in oy * bh..(oy + 1) * bh {
                for x in ox * bw..(ox + 1) * bw {
                    acc += self.get(y, x);
                }
            }
            acc / norm
        }))
    }

    pub fn to_u8(&self) -> GrayImage {
        let buf = self.data.iter().map(|&v| quantize(v)).collect();
        ImageBuffer::from_raw(self.width as u32, self.height as u32, buf)
            .expect("buffer length matches dimensions")
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        save_image(&self.to_u8(), path)
    }

    /// Loads an 8-bit map, resizing bilinearly to `size`×`size` when needed.
    pub fn load_png(path: &Path, size: usize) -> Result<Self> {
        let img = image::open(path).map_err(|e| image_error(path, e))?.to_luma8();
        let img: ImageBuffer<Luma<u8>, Vec<u8>> =
            if img.width() as usize != size || img.height() as usize != size {
                image::imageops::resize(&img, size as u32, size as u32, RESIZE_FILTER)
            } else {
                img
            };
        Ok(Self {
            height: size,
            width: size,
            data: img.as_raw().iter().map(|&v| v as f32 / 255.0).collect(),
        })
    }
}

#[inline]
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn image_error(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    }
}

fn save_image<P>(img: &ImageBuffer<P, Vec<u8>>, path: &Path) -> Result<()>
where
    P: image::PixelWithColorType<Subpixel = u8>,
{
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save(path).map_err(|e| image_error(path, e))
}

/// Fixed perceptual colormap (piecewise-linear "jet") for visualising maps in [0,1].
pub fn colormap(v: f32) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    let ch = |c: f32| (255.0 * (1.5 - (4.0 * v - c).abs()).clamp(0.0, 1.0)).round() as u8;
    [ch(3.0), ch(2.0), ch(1.0)]
}

pub fn colorize(map: &GrayMap) -> U8Rgb {
    let mut out = U8Rgb::new(map.width as u32, map.height as u32);
    for (i, px) in out.pixels_mut().enumerate() {
        *px = Rgb(colormap(map.data[i]));
    }
    out
}

pub fn save_rgb_u8(img: &U8Rgb, path: &Path) -> Result<()> {
    save_image(img, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn avg_pool_identity_and_blocks() {
        let m = GrayMap::from_fn(4, 4, |y, x| (y * 4 + x) as f32);
        assert_eq!(m.avg_pool_to(4).unwrap(), m);
        let p = m.avg_pool_to(2).unwrap();
        assert_eq!(p.data, vec![2.5, 4.5, 10.5, 12.5]);
        assert!(m.avg_pool_to(3).is_err());
    }

    #[test]
    fn colormap_endpoints() {
        assert_eq!(colormap(0.0), [0, 0, 128]);
        assert_eq!(colormap(1.0), [128, 0, 0]);
    }

    #[test]
    fn png_roundtrip_is_exact_for_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let img = RgbImage::from_fn(8, 8, |y, x| {
            [(y * 8 + x) as f32 / 255.0, 1.0, 0.0]
        });
        let path = dir.path().join("a.png");
        img.save_png(&path).unwrap();
        assert_eq!(RgbImage::load_png(&path, 8).unwrap(), img);
    }
}
