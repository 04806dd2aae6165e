//! Datasets: synthetic generation, manifest I/O, sample loading and
//! class-balanced batching.
//!
//! On-disk layout:
//!
//! ```text
//! root/{train,dev,test}/manifest.csv          path,label,attack_type,depth_path
//! root/{train,dev,test}/{live,spoof}/*.png
//! root/{train,dev,test}/{live,spoof}/*.depth.png   depth target at H/8
//! root/{train,dev,test}/spoof/*.face.png           geometry of the depicted face
//! ```
//!
//! Depth targets follow the zero-map convention: a spoof's `*.depth.png` is
//! all zero. The optional `*.face.png` sidecar carries the pseudo-depth of the
//! face shown in a spoof, which is the target for a spoof re-rendered with
//! live liveness features.

mod batches;
mod synth;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use batches::{balanced_batches, BalancedSampler, BatchPair};

use crate::error::{Error, Result};
use crate::raster::{GrayMap, RgbImage};
use crate::texture::lbp_gt_map;

/// Auxiliary maps live at this fraction of the image side.
pub const MAP_STRIDE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Live,
    Spoof,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackType {
    None,
    Print,
    Screen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Live => "live",
            Label::Spoof => "spoof",
        }
    }
}

impl AttackType {
    pub fn as_str(self) -> &'static str {
        match self {
            AttackType::None => "none",
            AttackType::Print => "print",
            AttackType::Screen => "screen",
        }
    }
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// One face image with its auxiliary targets.
#[derive(Debug, Clone)]
pub struct ImageSample {
    pub image: RgbImage,
    pub label: Label,
    pub attack_type: AttackType,
    pub lbp_gt: GrayMap,
    pub depth_gt: GrayMap,
    /// Pseudo-depth of the depicted face regardless of liveness. Equal to
    /// `depth_gt` for live samples; zero when a spoof has no face sidecar.
    pub face_depth: GrayMap,
    pub source_id: String,
    pub device: Option<String>,
}

impl ImageSample {
    pub fn is_live(&self) -> bool {
        self.label == Label::Live
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    #[serde(rename = "path")]
    pub image_path: PathBuf,
    pub label: Label,
    pub attack_type: AttackType,
    #[serde(default, deserialize_with = "empty_path_as_none")]
    pub depth_path: Option<PathBuf>,
}

fn empty_path_as_none<'de, D>(d: D) -> std::result::Result<Option<PathBuf>, D::Error>
where
    D: serde::Deserializer<'de>,
{
    let s: Option<String> = Option::deserialize(d)?;
    Ok(s.filter(|s| !s.is_empty()).map(PathBuf::from))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    /// Directory the entry paths are relative to.
    pub root_path: PathBuf,
    pub split: Split,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.csv";

impl DatasetManifest {
    pub fn manifest_path(&self) -> PathBuf {
        self.root_path.join(MANIFEST_FILE)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.root_path.join(p)
    }

    pub fn count(&self, label: Label) -> usize {
        self.entries.iter().filter(|e| e.label == label).count()
    }

    pub fn write(&self) -> Result<()> {
        let path = self.manifest_path();
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
        for e in &self.entries {
            w.serialize(e).map_err(|e| csv_error(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))
    }

    /// Reads `dataset_root/{split}/manifest.csv` and checks every referenced file exists.
    pub fn read(dataset_root: &Path, split: Split) -> Result<Self> {
        let root_path = dataset_root.join(split.as_str());
        let path = root_path.join(MANIFEST_FILE);
        if !path.exists() {
            return Err(Error::MissingArtifact(path));
        }
        let mut r = csv::Reader::from_path(&path).map_err(|e| csv_error(&path, e))?;
        let entries = r
            .deserialize()
            .collect::<std::result::Result<Vec<ManifestEntry>, _>>()
            .map_err(|e| csv_error(&path, e))?;
        let m = Self {
            root_path,
            split,
            entries,
        };
        m.validate()?;
        Ok(m)
    }

    /// Builds a manifest from `dir/{live,spoof}/*.png` without a CSV. Spoofs
    /// whose file name mentions `screen` or `replay` are tagged as screen
    /// attacks, the rest as print.
    pub fn discover(dir: &Path, split: Split) -> Result<Self> {
        let mut entries = Vec::new();
        for label in [Label::Live, Label::Spoof] {
            let sub = dir.join(label.as_str());
            let read = std::fs::read_dir(&sub).map_err(|e| Error::io(&sub, e))?;
            let mut names: Vec<String> = read
                .filter_map(|e| e.ok())
                .filter_map(|e| e.file_name().into_string().ok())
                .filter(|n| n.ends_with(".png") && !n.ends_with(".depth.png") && !n.ends_with(".face.png"))
                .collect();
            names.sort();
            for name in names {
                let rel = PathBuf::from(label.as_str()).join(&name);
                let depth = rel.with_file_name(format!("{}.depth.png", name.trim_end_matches(".png")));
                let attack_type = match label {
                    Label::Live => AttackType::None,
                    Label::Spoof if name.contains("screen") || name.contains("replay") => AttackType::Screen,
                    Label::Spoof => AttackType::Print,
                };
                entries.push(ManifestEntry {
                    depth_path: dir.join(&depth).exists().then_some(depth),
                    image_path: rel,
                    label,
                    attack_type,
                });
            }
        }
        let m = Self {
            root_path: dir.to_path_buf(),
            split,
            entries,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        for e in &self.entries {
            let consistent = matches!(
                (e.label, e.attack_type),
                (Label::Live, AttackType::None) | (Label::Spoof, AttackType::Print | AttackType::Screen)
            );
            if !consistent {
                return Err(Error::Dataset {
                    path: e.image_path.clone(),
                    reason: format!("label {} with attack type {}", e.label, e.attack_type.as_str()),
                });
            }
            for p in std::iter::once(&e.image_path).chain(e.depth_path.iter()) {
                let full = self.resolve(p);
                if !full.is_file() {
                    return Err(Error::MissingArtifact(full));
                }
            }
        }
        Ok(())
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Dataset {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ClassCounts {
    pub live: usize,
    pub spoof: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub root: PathBuf,
    pub resolution: usize,
    pub train: ClassCounts,
    pub dev: ClassCounts,
    pub test: ClassCounts,
    /// Number of simulated capture devices (colour cast + sensor noise).
    pub devices: usize,
    pub seed: u64,
}

impl GenConfig {
    pub fn counts(&self, split: Split) -> ClassCounts {
        match split {
            Split::Train => self.train,
            Split::Dev => self.dev,
            Split::Test => self.test,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution == 0 || !self.resolution.is_multiple_of(MAP_STRIDE) {
            return Err(Error::Config(format!(
                "resolution {} is not a positive multiple of {MAP_STRIDE}",
                self.resolution
            )));
        }
        if self.resolution < 3 * MAP_STRIDE {
            return Err(Error::Config(format!("resolution {} is too small", self.resolution)));
        }
        if self.devices == 0 {
            return Err(Error::Config("devices must be at least 1".into()));
        }
        Ok(())
    }
}

/// Independent stream per (seed, split, class, index) so samples do not
/// depend on generation order.
fn sample_rng(seed: u64, split: Split, label: Label, index: usize) -> ChaCha8Rng {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in [split as u64 + 1, label as u64 + 1, index as u64] {
        h = (h ^ v).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h ^= h >> 31;
    }
    ChaCha8Rng::seed_from_u64(h)
}

/// Writes every non-empty split of the configured dataset and returns their manifests.
pub fn generate_synthetic_dataset(config: &GenConfig) -> Result<Vec<DatasetManifest>> {
    config.validate()?;
    let r = config.resolution;
    let map = r / MAP_STRIDE;
    let mut manifests = Vec::new();
    for split in Split::ALL {
        let counts = config.counts(split);
        if counts.live + counts.spoof == 0 {
            continue;
        }
        let root_path = config.root.join(split.as_str());
        for sub in ["live", "spoof"] {
            let d = root_path.join(sub);
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        let mut entries = Vec::new();
        for (label, n) in [(Label::Live, counts.live), (Label::Spoof, counts.spoof)] {
            for i in 0..n {
                let mut rng = sample_rng(config.seed, split, label, i);
                let scene = synth::Scene::sample(&mut rng, r, config.devices);
                let rendered = scene.render(&mut rng);
                let face_depth = rendered.height.avg_pool_to(map)?;
                let stem = format!("{:05}_d{}", i, scene.device());
                let dir = PathBuf::from(label.as_str());
                let image_rel = dir.join(format!("{stem}.png"));
                let depth_rel = dir.join(format!("{stem}.depth.png"));
                let attack_type = match label {
                    Label::Live => {
                        rendered.image.save_png(&root_path.join(&image_rel))?;
                        face_depth.save_png(&root_path.join(&depth_rel))?;
                        AttackType::None
                    }
                    Label::Spoof => {
                        let attack = if rand::Rng::random_bool(&mut rng, 0.5) {
                            AttackType::Print
                        } else {
                            AttackType::Screen
                        };
                        synth::apply_attack(&rendered.image, attack, &mut rng)
                            .save_png(&root_path.join(&image_rel))?;
                        GrayMap::zeros(map, map).save_png(&root_path.join(&depth_rel))?;
                        face_depth.save_png(&root_path.join(dir.join(format!("{stem}.face.png"))))?;
                        attack
                    }
                };
                entries.push(ManifestEntry {
                    image_path: image_rel,
                    label,
                    attack_type,
                    depth_path: Some(depth_rel),
                });
            }
        }
        let m = DatasetManifest {
            root_path,
            split,
            entries,
        };
        m.write()?;
        manifests.push(m);
    }
    Ok(manifests)
}

fn face_sidecar(image_path: &Path) -> PathBuf {
    let name = image_path
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or_default()
        .trim_end_matches(".png");
    image_path.with_file_name(format!("{name}.face.png"))
}

fn device_tag(image_path: &Path) -> Option<String> {
    let stem = image_path.file_stem()?.to_str()?;
    let tag = stem.rsplit('_').next()?;
    (tag.len() > 1 && tag.starts_with('d') && tag[1..].chars().all(|c| c.is_ascii_digit()))
        .then(|| tag.to_string())
}

/// Loads one manifest entry at `resolution`×`resolution`.
pub fn load_sample(manifest: &DatasetManifest, entry: &ManifestEntry, resolution: usize) -> Result<ImageSample> {
    if resolution == 0 || !resolution.is_multiple_of(MAP_STRIDE) {
        return Err(Error::Config(format!("resolution {resolution} is not a multiple of {MAP_STRIDE}")));
    }
    let map = resolution / MAP_STRIDE;
    let path = manifest.resolve(&entry.image_path);
    let image = RgbImage::load_png(&path, resolution).map_err(|e| match e {
        Error::Image { path, reason } => Error::Dataset { path, reason },
        other => other,
    })?;
    let source_id = format!("{}/{}", manifest.split, entry.image_path.display());
    let device = device_tag(&entry.image_path);
    let sample = match entry.label {
        Label::Live => {
            let depth_rel = entry.depth_path.as_ref().ok_or_else(|| Error::Dataset {
                path: path.clone(),
                reason: "live sample has no depth sidecar".into(),
            })?;
            let depth_gt = GrayMap::load_png(&manifest.resolve(depth_rel), map)?;
            ImageSample {
                lbp_gt: lbp_gt_map(&image, map)?,
                face_depth: depth_gt.clone(),
                depth_gt,
                image,
                label: Label::Live,
                attack_type: entry.attack_type,
                source_id,
                device,
            }
        }
        Label::Spoof => {
            let face = manifest.resolve(&face_sidecar(&entry.image_path));
            let face_depth = if face.is_file() {
                GrayMap::load_png(&face, map)?
            } else {
                GrayMap::zeros(map, map)
            };
            ImageSample {
                image,
                label: Label::Spoof,
                attack_type: entry.attack_type,
                lbp_gt: GrayMap::zeros(map, map),
                depth_gt: GrayMap::zeros(map, map),
                face_depth,
                source_id,
                device,
            }
        }
    };
    Ok(sample)
}

pub fn load_dataset(manifest: &DatasetManifest, resolution: usize) -> Result<Vec<ImageSample>> {
    manifest
        .entries
        .iter()
        .map(|e| load_sample(manifest, e, resolution))
        .collect()
}

/// Reads `root/{split}` through its manifest, or by folder discovery when the
/// split has no manifest.
pub fn open_split(root: &Path, split: Split) -> Result<DatasetManifest> {
    let dir = root.join(split.as_str());
    if dir.join(MANIFEST_FILE).exists() {
        DatasetManifest::read(root, split)
    } else if dir.is_dir() {
        DatasetManifest::discover(&dir, split)
    } else {
        Err(Error::MissingArtifact(dir))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use sha2::{Digest, Sha256};

    fn config(root: &Path, live: usize, spoof: usize) -> GenConfig {
        GenConfig {
            root: root.to_path_buf(),
            resolution: 64,
            train: ClassCounts { live, spoof },
            dev: ClassCounts::default(),
            test: ClassCounts::default(),
            devices: 2,
            seed: 7,
        }
    }

    fn tree_hash(root: &Path) -> Vec<(String, Vec<u8>)> {
        let mut out = Vec::new();
        for label in ["live", "spoof"] {
            let dir = root.join("train").join(label);
            let mut names: Vec<_> = std::fs::read_dir(&dir)
                .unwrap()
                .map(|e| e.unwrap().file_name().into_string().unwrap())
                .collect();
            names.sort();
            for n in names {
                let bytes = std::fs::read(dir.join(&n)).unwrap();
                out.push((format!("{label}/{n}"), Sha256::digest(&bytes).to_vec()));
            }
        }
        out
    }

    #[test]
    fn generates_requested_counts() {
        let dir = tempfile::tempdir().unwrap();
        let ms = generate_synthetic_dataset(&config(dir.path(), 10, 10)).unwrap();
        assert_eq!(ms.len(), 1);
        let m = &ms[0];
        assert_eq!((m.count(Label::Live), m.count(Label::Spoof)), (10, 10));
        assert!(m.entries.iter().all(|e| e.depth_path.is_some()));
        let reread = DatasetManifest::read(dir.path(), Split::Train).unwrap();
        assert_eq!(&reread, m);
        // 20 images + 20 depth sidecars + 10 face sidecars
        let files = tree_hash(dir.path());
        assert_eq!(files.iter().filter(|(n, _)| n.ends_with(".depth.png")).count(), 20);
        assert_eq!(
            files
                .iter()
                .filter(|(n, _)| !n.ends_with(".depth.png") && !n.ends_with(".face.png"))
                .count(),
            20
        );
    }

    #[test]
    fn generation_is_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_synthetic_dataset(&config(a.path(), 3, 3)).unwrap();
        generate_synthetic_dataset(&config(b.path(), 3, 3)).unwrap();
        assert_eq!(tree_hash(a.path()), tree_hash(b.path()));
        let c = tempfile::tempdir().unwrap();
        generate_synthetic_dataset(&GenConfig { seed: 8, ..config(c.path(), 3, 3) }).unwrap();
        assert_ne!(tree_hash(a.path()), tree_hash(c.path()));
    }

    #[test]
    fn bad_resolution_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = generate_synthetic_dataset(&GenConfig {
            resolution: 63,
            ..config(dir.path(), 1, 1)
        })
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn loaded_samples_follow_zero_map_convention() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_synthetic_dataset(&config(dir.path(), 4, 4)).unwrap().remove(0);
        let samples = load_dataset(&m, 64).unwrap();
        assert_eq!(samples.len(), 8);
        for s in &samples {
            assert_eq!((s.image.height, s.image.width), (64, 64));
            assert_eq!((s.lbp_gt.height, s.depth_gt.height), (8, 8));
            assert!(s.image.data.iter().all(|v| (0.0..=1.0).contains(v)));
            match s.label {
                Label::Live => {
                    assert!(!s.lbp_gt.is_all_zero());
                    assert!(s.depth_gt.max() > 0.0);
                    assert_eq!(s.face_depth, s.depth_gt);
                }
                Label::Spoof => {
                    assert!(s.lbp_gt.is_all_zero());
                    assert!(s.depth_gt.is_all_zero());
                    assert!(s.face_depth.max() > 0.0);
                    assert_ne!(s.attack_type, AttackType::None);
                }
            }
            assert!(s.device.as_deref().is_some_and(|d| d.starts_with('d')));
        }
        // resizing on load
        let small = load_dataset(&m, 32).unwrap();
        assert_eq!((small[0].image.height, small[0].lbp_gt.height), (32, 4));
    }

    #[test]
    fn missing_live_sidecar_is_item_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = generate_synthetic_dataset(&config(dir.path(), 1, 1)).unwrap().remove(0);
        m.entries[0].depth_path = None;
        let err = load_sample(&m, &m.entries[0], 64).unwrap_err();
        assert!(matches!(err, Error::Dataset { .. }), "{err}");
    }

    #[test]
    fn corrupt_image_error_carries_path() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_synthetic_dataset(&config(dir.path(), 1, 1)).unwrap().remove(0);
        let p = m.resolve(&m.entries[1].image_path);
        std::fs::write(&p, b"not a png").unwrap();
        match load_sample(&m, &m.entries[1], 64).unwrap_err() {
            Error::Dataset { path, .. } => assert_eq!(path, p),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn discovery_matches_generated_layout() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_synthetic_dataset(&config(dir.path(), 2, 2)).unwrap().remove(0);
        let d = DatasetManifest::discover(&m.root_path, Split::Train).unwrap();
        assert_eq!(d.entries.len(), 4);
        assert_eq!(d.count(Label::Live), 2);
        assert!(d.entries.iter().all(|e| e.depth_path.is_some()));
    }

    #[test]
    fn missing_manifest_is_missing_artifact() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            DatasetManifest::read(dir.path(), Split::Dev),
            Err(Error::MissingArtifact(_))
        ));
    }
}
