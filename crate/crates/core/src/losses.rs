//! Loss terms of the disentanglement objective.
//!
//! Every L1 norm is reduced as a per-element mean so the weights do not
//! depend on resolution. Probabilities are clamped to `[ε, 1-ε]` inside logs.

use candle_core::{DType, Tensor};

use crate::dataio::Label;
use crate::error::{Error, Result};
use crate::nets::{Mode, ModelBundle, Swap};

pub const PROB_EPS: f64 = 1e-7;

/// λ1..λ4: image reconstruction, latent reconstruction, depth, LBP.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub image_rec: f64,
    pub latent_rec: f64,
    pub depth: f64,
    pub lbp: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            image_rec: 10.0,
            latent_rec: 1.0,
            depth: 1.0,
            lbp: 2.0,
        }
    }
}

impl LossWeights {
    pub fn as_array(&self) -> [f64; 4] {
        [self.image_rec, self.latent_rec, self.depth, self.lbp]
    }

    pub fn from_array([image_rec, latent_rec, depth, lbp]: [f64; 4]) -> Self {
        Self {
            image_rec,
            latent_rec,
            depth,
            lbp,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.as_array().iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and nonnegative, got {:?}", self.as_array())));
        }
        Ok(())
    }
}

/// Unweighted generator-side loss values.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub img_rec: f64,
    pub latent_rec: f64,
    pub lbp: f64,
    pub depth: f64,
    pub gen_adv: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBundle {
    pub img_rec: f64,
    pub latent_rec: f64,
    pub lbp: f64,
    pub depth: f64,
    pub gen_adv: f64,
    /// Present when the bundle also records the preceding discriminator step.
    pub disc: Option<f64>,
    pub total: f64,
}

impl LossBundle {
    pub fn parts(&self) -> LossParts {
        LossParts {
            img_rec: self.img_rec,
            latent_rec: self.latent_rec,
            lbp: self.lbp,
            depth: self.depth,
            gen_adv: self.gen_adv,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.img_rec, self.latent_rec, self.lbp, self.depth, self.gen_adv, self.total]
            .iter()
            .chain(self.disc.as_ref())
            .all(|v| v.is_finite())
    }
}

/// Weighted sum: `gen_adv + λ1·img_rec + λ2·latent_rec + λ3·depth + λ4·lbp`.
pub fn total_gen_loss(parts: &LossParts, w: &LossWeights) -> LossBundle {
    let total = parts.gen_adv
        + w.image_rec * parts.img_rec
        + w.latent_rec * parts.latent_rec
        + w.depth * parts.depth
        + w.lbp * parts.lbp;
    LossBundle {
        img_rec: parts.img_rec,
        latent_rec: parts.latent_rec,
        lbp: parts.lbp,
        depth: parts.depth,
        gen_adv: parts.gen_adv,
        disc: None,
        total,
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Mean absolute difference over all elements.
pub fn l1_mean(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("l1_mean: {:?} vs {:?}", a.dims(), b.dims())));
    }
    if a.elem_count() == 0 {
        return Err(Error::Shape("l1_mean of empty tensors".into()));
    }
    Ok((a - b)?.abs()?.mean_all()?)
}

/// Reconstruction error of `decode(encode(x))` against `x`.
pub fn image_rec_loss(models: &ModelBundle, images: &Tensor, mode: Mode) -> Result<Tensor> {
    let code = models.encode(images, mode)?;
    let rec = models.decode(&code.content, &code.liveness, &code.shortcuts, mode)?;
    l1_mean(&rec, images)
}

/// Re-encodes the swapped images `[A_b; B_a]` and compares their joint
/// (content, liveness) codes with `(C_A, L_B)` and `(C_B, L_A)`.
pub fn latent_rec_loss(models: &ModelBundle, swap: &Swap, mode: Mode) -> Result<Tensor> {
    let re = models.encode(&swap.translations()?, mode)?;
    let (a, b) = (&swap.code_a, &swap.code_b);
    let target = Tensor::cat(
        &[
            Tensor::cat(&[&a.content, &b.liveness], 1)?,
            Tensor::cat(&[&b.content, &a.liveness], 1)?,
        ],
        0,
    )?;
    l1_mean(&re.joint()?, &target)
}

/// LBP maps estimated from `liveness` against `lbp_gts` for live rows and
/// against zero for spoof rows.
pub fn lbp_loss(models: &ModelBundle, liveness: &Tensor, labels: &[Label], lbp_gts: &Tensor, mode: Mode) -> Result<Tensor> {
    let pred = models.lbp_map(liveness, mode)?;
    if labels.len() != pred.dim(0)? {
        return Err(Error::Shape(format!("{} labels for {} feature maps", labels.len(), pred.dim(0)?)));
    }
    let mask: Vec<f64> = labels.iter().map(|l| if *l == Label::Live { 1.0 } else { 0.0 }).collect();
    let mask = Tensor::from_vec(mask, (labels.len(), 1, 1), pred.device())?.to_dtype(pred.dtype())?;
    let target = lbp_gts.broadcast_mul(&mask)?;
    l1_mean(&pred, &target)
}

/// Depth maps of `images` against `targets`. Callers pass a frozen mode so
/// the depth net only supplies supervision.
pub fn depth_loss(models: &ModelBundle, images: &Tensor, targets: &Tensor, mode: Mode) -> Result<Tensor> {
    l1_mean(&models.depth_map(images, mode)?, targets)
}

fn neg_log(p: &Tensor) -> Result<Tensor> {
    Ok(p.clamp(PROB_EPS, 1.0 - PROB_EPS)?.log()?.neg()?)
}

/// `-mean log p_real - mean log(1 - p_gen)` for one discriminator.
pub fn disc_objective(p_real: &Tensor, p_gen: &Tensor) -> Result<Tensor> {
    let real = neg_log(p_real)?.mean_all()?;
    let fake = neg_log(&p_gen.affine(-1.0, 1.0)?)?.mean_all()?;
    Ok((real + fake)?)
}

/// `-mean log p_gen` for one discriminator.
pub fn gen_adv_objective(p_gen: &Tensor) -> Result<Tensor> {
    Ok(neg_log(p_gen)?.mean_all()?)
}

/// Discriminator loss summed over both scales. Generated images are detached.
pub fn disc_loss(models: &ModelBundle, real: &Tensor, generated: &Tensor, mode: Mode) -> Result<Tensor> {
    let fake = generated.detach();
    let mut total: Option<Tensor> = None;
    for scale in [1, 2] {
        let term = disc_objective(&models.discriminate(real, scale, mode)?, &models.discriminate(&fake, scale, mode)?)?;
        total = Some(match total {
            None => term,
            Some(t) => (t + term)?,
        });
    }
    Ok(total.expect("two scales"))
}

/// Generator adversarial loss over both scales; pass a frozen mode so the
/// discriminators are not updated through it.
pub fn gen_adv_loss(models: &ModelBundle, generated: &Tensor, mode: Mode) -> Result<Tensor> {
    let d1 = gen_adv_objective(&models.discriminate(generated, 1, mode)?)?;
    let d2 = gen_adv_objective(&models.discriminate(generated, 2, mode)?)?;
    Ok((d1 + d2)?)
}

/// Per-network forward modes used while evaluating the generator objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenModes {
    pub generator: Mode,
    pub depth: Mode,
    pub disc: Mode,
}

impl GenModes {
    /// Generator trains; the depth net uses running stats and the
    /// discriminators batch stats, both with parameters held fixed.
    pub const TRAIN: GenModes = GenModes {
        generator: Mode::TRAIN,
        depth: Mode::EVAL,
        disc: Mode::TRAIN.fixed(),
    };

    /// Side-effect-free and nothing detached, for gradient checks.
    pub const PROBE: GenModes = GenModes {
        generator: Mode::PROBE,
        depth: Mode {
            train: false,
            update_stats: false,
            frozen: false,
        },
        disc: Mode::PROBE,
    };
}

/// One balanced batch: live images A with their targets, spoof images B.
#[derive(Debug, Clone)]
pub struct PairBatch {
    /// (n, 3, R, R)
    pub live: Tensor,
    /// (n, 3, R, R)
    pub spoof: Tensor,
    /// (n, R/8, R/8) LBP targets of A.
    pub live_lbp: Tensor,
    /// (n, R/8, R/8) depth of the face in A.
    pub live_depth: Tensor,
    /// (n, R/8, R/8) depth of the face in B (zero when unknown).
    pub spoof_face_depth: Tensor,
}

impl PairBatch {
    pub fn n(&self) -> Result<usize> {
        Ok(self.live.dim(0)?)
    }

    pub fn real(&self) -> Result<Tensor> {
        Ok(Tensor::cat(&[&self.live, &self.spoof], 0)?)
    }
}

/// Differentiable generator terms of one batch.
#[derive(Debug, Clone)]
pub struct GenTerms {
    pub img_rec: Tensor,
    pub latent_rec: Tensor,
    pub lbp: Tensor,
    pub depth: Tensor,
    pub gen_adv: Tensor,
}

impl GenTerms {
    pub fn total(&self, w: &LossWeights) -> Result<Tensor> {
        let t = (&self.gen_adv
            + (self.img_rec.affine(w.image_rec, 0.0)?
                + (self.latent_rec.affine(w.latent_rec, 0.0)?
                    + (self.depth.affine(w.depth, 0.0)? + self.lbp.affine(w.lbp, 0.0)?)?)?)?)?;
        Ok(t)
    }

    pub fn parts(&self) -> Result<LossParts> {
        Ok(LossParts {
            img_rec: scalar(&self.img_rec)?,
            latent_rec: scalar(&self.latent_rec)?,
            lbp: scalar(&self.lbp)?,
            depth: scalar(&self.depth)?,
            gen_adv: scalar(&self.gen_adv)?,
        })
    }
}

/// Swaps liveness between A and B and evaluates every generator term.
pub fn generator_terms(models: &ModelBundle, batch: &PairBatch, modes: GenModes) -> Result<GenTerms> {
    let n = batch.n()?;
    let swap = models.swap(&batch.live, &batch.spoof, modes.generator)?;
    let img_rec = l1_mean(&swap.reconstructions()?, &batch.real()?)?;
    let latent_rec = latent_rec_loss(models, &swap, modes.generator)?;

    let liveness = Tensor::cat(&[&swap.code_a.liveness, &swap.code_b.liveness], 0)?;
    let labels: Vec<Label> = std::iter::repeat_n(Label::Live, n).chain(std::iter::repeat_n(Label::Spoof, n)).collect();
    let lbp_gts = Tensor::cat(&[&batch.live_lbp, &batch.live_lbp.zeros_like()?], 0)?;
    let lbp = lbp_loss(models, &liveness, &labels, &lbp_gts, modes.generator)?;

    let zero = batch.live_depth.zeros_like()?;
    let depth_targets = Tensor::cat(&[&batch.live_depth, &zero, &zero, &batch.spoof_face_depth], 0)?;
    let depth = depth_loss(models, &swap.generated, &depth_targets, modes.depth)?;

    let gen_adv = gen_adv_loss(models, &swap.generated, modes.disc)?;
    Ok(GenTerms {
        img_rec,
        latent_rec,
        lbp,
        depth,
        gen_adv,
    })
}

pub(crate) fn to_f64(t: &Tensor) -> Result<f64> {
    scalar(t)
}
