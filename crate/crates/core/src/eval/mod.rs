//! Scoring, threshold selection and PAD metrics.
//!
//! A sample is classified live when its fused score is at least the
//! threshold. Scores are mean absolute values of the estimated maps, so
//! live faces (nonzero targets) score high and attacks (zero targets) low.

mod artifacts;

use std::path::Path;

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

pub use artifacts::{
    delta_map, export_features, pca_2d, read_features, render_delta, render_map, scatter_plot, translate_pair, write_features,
    FeatureRow, Translation, TRANSLATION_NAMES,
};

use crate::dataio::{ImageSample, Label};
use crate::error::{Error, Result};
use crate::nets::{Mode, ModelBundle};
use crate::trainer::TensorSet;

/// Images scored per forward pass.
pub const SCORE_BATCH: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    #[default]
    Average,
    Max,
}

impl Fusion {
    pub fn combine(self, lbp: f64, depth: f64) -> f64 {
        match self {
            Fusion::Average => (lbp + depth) / 2.0,
            Fusion::Max => lbp.max(depth),
        }
    }
}

impl std::str::FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" | "avg" => Ok(Fusion::Average),
            "max" => Ok(Fusion::Max),
            other => Err(Error::Config(format!("unknown fusion `{other}` (average|max)"))),
        }
    }
}

impl std::fmt::Display for Fusion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Fusion::Average => "average",
            Fusion::Max => "max",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub lbp: f64,
    pub depth: f64,
    pub fused: f64,
}

/// Per-image scores of an (N, 3, R, R) batch. Only the encoder, LBP net and
/// depth net run; nothing is decoded.
pub fn infer_scores(models: &ModelBundle, images: &Tensor, fusion: Fusion) -> Result<Vec<Scores>> {
    let mut out = Vec::with_capacity(images.dim(0)?);
    let n = images.dim(0)?;
    let mut start = 0;
    while start < n {
        let len = SCORE_BATCH.min(n - start);
        let maps = models.aux_maps(&images.narrow(0, start, len)?, Mode::EVAL)?;
        let lbp = mean_abs_rows(&maps.lbp_map)?;
        let depth = mean_abs_rows(&maps.depth_map)?;
        out.extend(lbp.into_iter().zip(depth).map(|(l, d)| Scores {
            lbp: l,
            depth: d,
            fused: fusion.combine(l, d),
        }));
        start += len;
    }
    Ok(out)
}

fn mean_abs_rows(maps: &Tensor) -> Result<Vec<f64>> {
    Ok(maps
        .abs()?
        .flatten_from(1)?
        .mean(D::Minus1)?
        .to_dtype(candle_core::DType::F64)?
        .to_vec1()?)
}

/// Percentages of one operating point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub apcer: f64,
    pub bpcer: f64,
    pub acer: f64,
    pub hter: f64,
}

/// Live samples below, and spoof samples at or above, the threshold.
fn error_counts(scores: &[f64], labels: &[Label], threshold: f64) -> (usize, usize, usize, usize) {
    let (mut rejected, mut live, mut accepted, mut spoof) = (0, 0, 0, 0);
    for (s, l) in scores.iter().zip(labels) {
        match l {
            Label::Live => {
                live += 1;
                rejected += usize::from(*s < threshold);
            }
            Label::Spoof => {
                spoof += 1;
                accepted += usize::from(*s >= threshold);
            }
        }
    }
    (rejected, live, accepted, spoof)
}

fn check_lengths(scores: &[f64], labels: &[Label]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    Ok(())
}

pub fn compute_metrics(scores: &[f64], labels: &[Label], threshold: f64) -> Result<Metrics> {
    check_lengths(scores, labels)?;
    let (rejected, live, accepted, spoof) = error_counts(scores, labels, threshold);
    if live == 0 || spoof == 0 {
        return Err(Error::UndefinedMetric(format!(
            "need both classes, got {live} live and {spoof} spoof samples"
        )));
    }
    let apcer = 100.0 * accepted as f64 / spoof as f64;
    let bpcer = 100.0 * rejected as f64 / live as f64;
    // false acceptance and false rejection coincide with APCER and BPCER here
    let (far, frr) = (apcer, bpcer);
    Ok(Metrics {
        apcer,
        bpcer,
        acer: (apcer + bpcer) / 2.0,
        hter: (far + frr) / 2.0,
    })
}

/// Equal-error-rate threshold: among the minimum score, the midpoints between
/// consecutive distinct scores, and a point above the maximum, the candidate
/// minimizing |FAR − FRR|, ties going to the lower threshold.
pub fn select_threshold(scores: &[f64], labels: &[Label]) -> Result<f64> {
    check_lengths(scores, labels)?;
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("non-finite score".into()));
    }
    let live = labels.iter().filter(|l| **l == Label::Live).count();
    let spoof = labels.len() - live;
    if live == 0 || spoof == 0 {
        return Err(Error::UndefinedMetric(format!(
            "threshold needs both classes, got {live} live and {spoof} spoof samples"
        )));
    }
    let mut distinct = scores.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let top = distinct[distinct.len() - 1];
    let mut candidates = vec![distinct[0]];
    candidates.extend(distinct.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0));
    candidates.push(top + 1.0_f64.max(top.abs()));

    let mut best = (f64::INFINITY, candidates[0]);
    for thr in candidates {
        let (rejected, _, accepted, _) = error_counts(scores, labels, thr);
        let gap = (accepted as f64 / spoof as f64 - rejected as f64 / live as f64).abs();
        if gap < best.0 {
            best = (gap, thr);
        }
    }
    Ok(best.1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleScore {
    pub source_id: String,
    pub label: Label,
    pub scores: Scores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub fusion: Fusion,
    pub threshold: f64,
    /// Where the threshold came from, e.g. `dev-eer`.
    pub threshold_source: String,
    pub n_live: usize,
    pub n_spoof: usize,
    pub metrics: Metrics,
    pub mean_live_score: f64,
    pub mean_spoof_score: f64,
    #[serde(skip)]
    pub samples: Vec<SampleScore>,
}

pub fn score_samples(models: &ModelBundle, samples: &[ImageSample], fusion: Fusion) -> Result<Vec<SampleScore>> {
    let data = TensorSet::from_samples(samples, models.dtype())?;
    let scores = infer_scores(models, &data.images, fusion)?;
    Ok(samples
        .iter()
        .zip(scores)
        .map(|(s, scores)| SampleScore {
            source_id: s.source_id.clone(),
            label: s.label,
            scores,
        })
        .collect())
}

fn fused(samples: &[SampleScore]) -> (Vec<f64>, Vec<Label>) {
    samples.iter().map(|s| (s.scores.fused, s.label)).unzip()
}

pub fn eer_threshold(samples: &[SampleScore]) -> Result<f64> {
    let (scores, labels) = fused(samples);
    select_threshold(&scores, &labels)
}

pub fn build_report(
    split: &str,
    samples: Vec<SampleScore>,
    threshold: f64,
    threshold_source: &str,
    fusion: Fusion,
) -> Result<EvalReport> {
    let (scores, labels) = fused(&samples);
    let metrics = compute_metrics(&scores, &labels, threshold)?;
    let mean_of = |l: Label| {
        let v: Vec<f64> = samples.iter().filter(|s| s.label == l).map(|s| s.scores.fused).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    Ok(EvalReport {
        split: split.to_string(),
        fusion,
        threshold,
        threshold_source: threshold_source.to_string(),
        n_live: labels.iter().filter(|l| **l == Label::Live).count(),
        n_spoof: labels.iter().filter(|l| **l == Label::Spoof).count(),
        metrics,
        mean_live_score: mean_of(Label::Live),
        mean_spoof_score: mean_of(Label::Spoof),
        samples,
    })
}

impl EvalReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    /// `source_id,label,score_lbp,score_depth,score_fused`
    pub fn write_scores_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
        let err = |e: csv::Error| Error::Format(e.to_string());
        w.write_record(["source_id", "label", "score_lbp", "score_depth", "score_fused"]).map_err(err)?;
        for s in &self.samples {
            w.write_record([
                s.source_id.as_str(),
                s.label.as_str(),
                &s.scores.lbp.to_string(),
                &s.scores.depth.to_string(),
                &s.scores.fused.to_string(),
            ])
            .map_err(err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests;
