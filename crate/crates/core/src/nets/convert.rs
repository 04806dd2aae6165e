//! Conversions between raster types and NCHW / NHW tensors.

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::raster::{GrayMap, RgbImage};

/// Stacks HWC images into an (N, 3, H, W) tensor.
pub fn images_to_tensor(images: &[&RgbImage], dtype: DType) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::Shape("empty image batch".into()))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * h * w * 3);
    for img in images {
        if (img.height, img.width) != (h, w) {
            return Err(Error::Shape(format!("mixed image sizes {}x{} and {}x{}", h, w, img.height, img.width)));
        }
        data.extend_from_slice(&img.data);
    }
    let t = Tensor::from_vec(data, (images.len(), h, w, 3), &Device::Cpu)?;
    Ok(t.permute((0, 3, 1, 2))?.contiguous()?.to_dtype(dtype)?)
}

/// Stacks maps into an (N, H, W) tensor.
pub fn maps_to_tensor(maps: &[&GrayMap], dtype: DType) -> Result<Tensor> {
    let first = maps.first().ok_or_else(|| Error::Shape("empty map batch".into()))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(maps.len() * h * w);
    for m in maps {
        if (m.height, m.width) != (h, w) {
            return Err(Error::Shape(format!("mixed map sizes {}x{} and {}x{}", h, w, m.height, m.width)));
        }
        data.extend_from_slice(&m.data);
    }
    Ok(Tensor::from_vec(data, (maps.len(), h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Splits an (N, 3, H, W) tensor into images.
pub fn tensor_to_images(t: &Tensor) -> Result<Vec<RgbImage>> {
    let (n, c, h, w) = t.dims4()?;
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let data: Vec<f32> = t.permute((0, 2, 3, 1))?.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    Ok(data
        .chunks_exact(h * w * 3)
        .take(n)
        .map(|chunk| RgbImage {
            height: h,
            width: w,
            data: chunk.to_vec(),
        })
        .collect())
}

/// Splits an (N, H, W) tensor into maps.
pub fn tensor_to_maps(t: &Tensor) -> Result<Vec<GrayMap>> {
    let (n, h, w) = t.dims3()?;
    let data: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    Ok(data
        .chunks_exact(h * w)
        .take(n)
        .map(|chunk| GrayMap {
            height: h,
            width: w,
            data: chunk.to_vec(),
        })
        .collect())
}
