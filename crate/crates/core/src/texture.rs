//! Local binary pattern maps used as the texture target for live faces.
//!
//! Convention: LBP(8,1) with `>=` comparison against the centre, bit `k` for
//! the `k`-th neighbour walking clockwise from the top-left, and edge
//! replication at the borders.
//!
//! ```text
//! 0 1 2
//! 7 c 3
//! 6 5 4
//! ```

use crate::error::{Error, Result};
use crate::raster::{GrayMap, RgbImage};

/// Per-pixel 8-bit LBP codes, same size as the source image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LbpCodeMap {
    pub height: usize,
    pub width: usize,
    pub codes: Vec<u8>,
}

impl LbpCodeMap {
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.codes[y * self.width + x]
    }

    pub fn normalized(&self) -> GrayMap {
        GrayMap {
            height: self.height,
            width: self.width,
            data: self.codes.iter().map(|&c| c as f32 / 255.0).collect(),
        }
    }
}

/// (dy, dx) for bits 0..8.
const NEIGHBOURS: [(isize, isize); 8] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
    (1, 0),
    (1, -1),
    (0, -1),
];

pub fn lbp_code_map(gray: &GrayMap) -> Result<LbpCodeMap> {
    let (h, w) = (gray.height, gray.width);
    if h < 3 || w < 3 {
        return Err(Error::Shape(format!("LBP needs at least 3x3 input, got {h}x{w}")));
    }
    let mut codes = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let centre = gray.get(y, x);
            let mut code = 0u8;
            for (bit, &(dy, dx)) in NEIGHBOURS.iter().enumerate() {
                let ny = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                let nx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                if gray.get(ny, nx) >= centre {
                    code |= 1 << bit;
                }
            }
            codes.push(code);
        }
    }
    Ok(LbpCodeMap {
        height: h,
        width: w,
        codes,
    })
}

/// Texture target for a live image: gray → LBP codes / 255 → block average
/// down to `out_size`×`out_size`.
pub fn lbp_gt_map(image: &RgbImage, out_size: usize) -> Result<GrayMap> {
    if out_size == 0 || !image.height.is_multiple_of(out_size) || !image.width.is_multiple_of(out_size) {
        return Err(Error::Shape(format!(
            "LBP target size {out_size} does not divide {}x{}",
            image.height, image.width
        )));
    }
    lbp_code_map(&image.to_gray())?
        .normalized()
        .avg_pool_to(out_size)
}
