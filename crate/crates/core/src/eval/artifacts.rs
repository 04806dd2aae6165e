//! Translation panels, delta maps, feature export and the PCA scatter.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::DType;
use image::imageops::{self, FilterType};
use image::{Rgb, RgbImage as U8Rgb};
use nalgebra::{DMatrix, SymmetricEigen};

use crate::dataio::{AttackType, ImageSample, Label};
use crate::error::{Error, Result};
use crate::nets::convert::{images_to_tensor, tensor_to_images, tensor_to_maps};
use crate::nets::{Mode, ModelBundle};
use crate::raster::{colorize, save_rgb_u8, GrayMap, RgbImage};
use crate::trainer::TensorSet;

use super::SCORE_BATCH;

/// File stems of the four decoded images: Dec(C_A,L_A), Dec(C_B,L_B),
/// Dec(C_A,L_B), Dec(C_B,L_A).
pub const TRANSLATION_NAMES: [&str; 4] = ["a_rec", "b_rec", "a_b", "b_a"];

#[derive(Debug, Clone)]
pub struct Translation {
    pub live: RgbImage,
    pub spoof: RgbImage,
    /// In [`TRANSLATION_NAMES`] order.
    pub images: Vec<RgbImage>,
    pub lbp_maps: Vec<GrayMap>,
    pub depth_maps: Vec<GrayMap>,
}

/// Swaps liveness features between a live image and a spoof image and
/// estimates LBP and depth maps for each decoded image.
pub fn translate_pair(models: &ModelBundle, live: &RgbImage, spoof: &RgbImage) -> Result<Translation> {
    let dtype = models.dtype();
    let a = images_to_tensor(&[live], dtype)?;
    let b = images_to_tensor(&[spoof], dtype)?;
    let swap = models.swap(&a, &b, Mode::EVAL)?;
    let maps = models.aux_maps(&swap.generated, Mode::EVAL)?;
    Ok(Translation {
        live: live.clone(),
        spoof: spoof.clone(),
        images: tensor_to_images(&swap.generated)?,
        lbp_maps: tensor_to_maps(&maps.lbp_map)?,
        depth_maps: tensor_to_maps(&maps.depth_map)?,
    })
}

impl Translation {
    pub fn image(&self, name: &str) -> Option<&RgbImage> {
        TRANSLATION_NAMES.iter().position(|n| *n == name).map(|i| &self.images[i])
    }

    /// (name, original, decoded) for every delta map written.
    fn delta_pairs(&self) -> [(&'static str, &RgbImage, &RgbImage); 4] {
        [
            ("a_rec", &self.live, &self.images[0]),
            ("b_rec", &self.spoof, &self.images[1]),
            ("a_b", &self.live, &self.images[2]),
            ("b_a", &self.spoof, &self.images[3]),
        ]
    }

    /// Mean of each raw delta map, keyed like the delta files.
    pub fn delta_means(&self) -> Result<BTreeMap<String, f64>> {
        self.delta_pairs()
            .iter()
            .map(|(n, o, t)| Ok((n.to_string(), delta_map(o, t)?.mean_abs() as f64)))
            .collect()
    }

    /// Writes the originals, decoded images, their maps and delta maps under
    /// `dir` with file names starting with `prefix`. Returns the paths.
    pub fn write(&self, dir: &Path, prefix: &str) -> Result<Vec<PathBuf>> {
        let mut out = Vec::new();
        let mut put = |name: String, img: &U8Rgb| -> Result<()> {
            let p = dir.join(format!("{prefix}_{name}.png"));
            save_rgb_u8(img, &p)?;
            out.push(p);
            Ok(())
        };
        let size = self.live.width as u32;
        put("a".into(), &self.live.to_u8())?;
        put("b".into(), &self.spoof.to_u8())?;
        for (i, name) in TRANSLATION_NAMES.iter().enumerate() {
            put(name.to_string(), &self.images[i].to_u8())?;
            put(format!("{name}_depth"), &render_map(&self.depth_maps[i], size))?;
            put(format!("{name}_lbp"), &render_map(&self.lbp_maps[i], size))?;
        }
        for (name, orig, decoded) in self.delta_pairs() {
            put(format!("delta_{name}"), &render_delta(&delta_map(orig, decoded)?))?;
        }
        Ok(out)
    }
}

/// Per-pixel |original − translated| averaged over channels.
pub fn delta_map(original: &RgbImage, translated: &RgbImage) -> Result<GrayMap> {
    if (original.height, original.width) != (translated.height, translated.width) {
        return Err(Error::Shape(format!(
            "delta of {}x{} and {}x{} images",
            original.height, original.width, translated.height, translated.width
        )));
    }
    let data = original
        .data
        .chunks_exact(3)
        .zip(translated.data.chunks_exact(3))
        .map(|(o, t)| o.iter().zip(t).map(|(a, b)| (a - b).abs()).sum::<f32>() / 3.0)
        .collect();
    Ok(GrayMap {
        height: original.height,
        width: original.width,
        data,
    })
}

/// Delta map scaled by its maximum to [0,1] and colour-mapped. An all-zero
/// delta renders as the colormap's zero colour.
pub fn render_delta(delta: &GrayMap) -> U8Rgb {
    let max = delta.max();
    let scaled = GrayMap {
        data: delta.data.iter().map(|v| if max > 0.0 { v / max } else { 0.0 }).collect(),
        ..delta.clone()
    };
    colorize(&scaled)
}

/// Map clamped to [0,1], colour-mapped and enlarged to `size` pixels.
pub fn render_map(map: &GrayMap, size: u32) -> U8Rgb {
    imageops::resize(&colorize(map), size, size, FilterType::Nearest)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub source_id: String,
    pub label: Label,
    pub attack_type: AttackType,
    pub device: String,
    pub features: Vec<f32>,
}

/// Flattened liveness features (optionally followed by content features).
pub fn export_features(models: &ModelBundle, samples: &[ImageSample], include_content: bool) -> Result<Vec<FeatureRow>> {
    let data = TensorSet::from_samples(samples, models.dtype())?;
    let mut rows = Vec::with_capacity(samples.len());
    let n = data.len();
    let mut start = 0;
    while start < n {
        let len = SCORE_BATCH.min(n - start);
        let code = models.encode(&data.images.narrow(0, start, len)?, Mode::EVAL)?;
        let mut feats = code.liveness.flatten_from(1)?;
        if include_content {
            feats = candle_core::Tensor::cat(&[&feats, &code.content.flatten_from(1)?], 1)?;
        }
        let feats: Vec<Vec<f32>> = feats.to_dtype(DType::F32)?.to_vec2()?;
        for (s, f) in samples[start..start + len].iter().zip(feats) {
            rows.push(FeatureRow {
                source_id: s.source_id.clone(),
                label: s.label,
                attack_type: s.attack_type,
                device: s.device.clone().unwrap_or_default(),
                features: f,
            });
        }
        start += len;
    }
    Ok(rows)
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Format(format!("{}: {e}", path.display()))
}

/// `source_id,label,attack_type,device,f0,f1,...`
pub fn write_features(path: &Path, rows: &[FeatureRow]) -> Result<()> {
    let dim = rows.first().map_or(0, |r| r.features.len());
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    let mut header: Vec<String> = ["source_id", "label", "attack_type", "device"].map(String::from).to_vec();
    header.extend((0..dim).map(|i| format!("f{i}")));
    w.write_record(&header).map_err(csv_err(path))?;
    for r in rows {
        if r.features.len() != dim {
            return Err(Error::Shape("feature rows differ in length".into()));
        }
        let mut rec = vec![
            r.source_id.clone(),
            r.label.as_str().to_string(),
            r.attack_type.as_str().to_string(),
            r.device.clone(),
        ];
        rec.extend(r.features.iter().map(f32::to_string));
        w.write_record(&rec).map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<Vec<FeatureRow>> {
    if !path.is_file() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let bad = |what: &str| Error::Format(format!("{}: bad {what}", path.display()));
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err(path))?;
        if rec.len() < 4 {
            return Err(bad("row"));
        }
        let label = match &rec[1] {
            "live" => Label::Live,
            "spoof" => Label::Spoof,
            _ => return Err(bad("label")),
        };
        let attack_type = match &rec[2] {
            "none" => AttackType::None,
            "print" => AttackType::Print,
            "screen" => AttackType::Screen,
            _ => return Err(bad("attack_type")),
        };
        let features = rec
            .iter()
            .skip(4)
            .map(|v| v.parse::<f32>().map_err(|_| bad("feature value")))
            .collect::<Result<_>>()?;
        rows.push(FeatureRow {
            source_id: rec[0].to_string(),
            label,
            attack_type,
            device: rec[3].to_string(),
            features,
        });
    }
    Ok(rows)
}

/// Projection onto the top two principal components. Each component's sign
/// is fixed so its largest-magnitude loading is positive.
pub fn pca_2d(rows: &[Vec<f32>]) -> Result<Vec<[f64; 2]>> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if n < 2 || d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(Error::Shape(format!("PCA needs at least 2 equal-length rows, got {n}")));
    }
    let mut x = DMatrix::<f64>::from_fn(n, d, |i, j| rows[i][j] as f64);
    for j in 0..d {
        let mean = x.column(j).mean();
        x.column_mut(j).add_scalar_mut(-mean);
    }
    // eigenvectors of the n×n Gram matrix give the scores directly
    let gram = &x * x.transpose();
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut out = vec![[0.0; 2]; n];
    for (k, &idx) in order.iter().take(2).enumerate() {
        let lambda = eig.eigenvalues[idx].max(0.0);
        let u = eig.eigenvectors.column(idx);
        let loading = x.transpose() * u;
        let pivot = loading.iter().copied().max_by(|a, b| a.abs().total_cmp(&b.abs())).unwrap_or(0.0);
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            out[i][k] = sign * u[i] * lambda.sqrt();
        }
    }
    Ok(out)
}

const PALETTE: [[u8; 3]; 8] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [255, 127, 14],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [23, 190, 207],
];

/// Draws `points` into a `size`×`size` PNG, one colour per distinct group
/// (in sorted order). Returns the group → colour assignment.
pub fn scatter_plot(points: &[[f64; 2]], groups: &[String], path: &Path, size: u32) -> Result<BTreeMap<String, [u8; 3]>> {
    if points.len() != groups.len() || points.is_empty() {
        return Err(Error::Shape(format!("{} points for {} groups", points.len(), groups.len())));
    }
    let mut colours = BTreeMap::new();
    for g in groups {
        let next = PALETTE[colours.len() % PALETTE.len()];
        colours.entry(g.clone()).or_insert(next);
    }
    let bounds = |k: usize| {
        let (lo, hi) = points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p[k]), hi.max(p[k])));
        let pad = ((hi - lo) * 0.05).max(1e-9);
        (lo - pad, hi + pad)
    };
    let ((x0, x1), (y0, y1)) = (bounds(0), bounds(1));
    let margin = 16.0;
    let span = size as f64 - 2.0 * margin;
    let mut img = U8Rgb::from_pixel(size, size, Rgb([255, 255, 255]));
    let last = size - 1 - margin as u32;
    for t in margin as u32..=last {
        for (x, y) in [(t, margin as u32), (t, last), (margin as u32, t), (last, t)] {
            img.put_pixel(x, y, Rgb([160, 160, 160]));
        }
    }
    for (p, g) in points.iter().zip(groups) {
        let cx = margin + (p[0] - x0) / (x1 - x0) * span;
        let cy = margin + (1.0 - (p[1] - y0) / (y1 - y0)) * span;
        let c = Rgb(colours[g]);
        for dy in -2i64..=2 {
            for dx in -2i64..=2 {
                let (x, y) = (cx as i64 + dx, cy as i64 + dy);
                if x >= 0 && y >= 0 && (x as u32) < size && (y as u32) < size {
                    img.put_pixel(x as u32, y as u32, c);
                }
            }
        }
    }
    // legend swatches along the top edge, in group order
    for (i, c) in colours.values().enumerate() {
        let x = margin as u32 + 4 + 14 * i as u32;
        for dy in 2..12 {
            for dx in 0..10 {
                if x + dx < size {
                    img.put_pixel(x + dx, dy, Rgb(*c));
                }
            }
        }
    }
    save_rgb_u8(&img, path)?;
    Ok(colours)
}
