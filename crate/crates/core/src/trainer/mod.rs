//! Depth-net pretraining and the alternating discriminator/generator loop.
//!
//! Each iteration first updates both discriminators on real `{A, B}` against
//! generated `{A′, B′, A_b, B_a}`, then recomputes the swap and updates the
//! encoder, decoder and LBP net on the weighted generator objective. The
//! depth net stays frozen throughout.

mod adam;

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use adam::{Adam, ADAM_EPS};

use crate::config::{join_list, FlatConfig};
use crate::dataio::{BalancedSampler, BatchPair, ImageSample, Label};
use crate::error::{Error, Result};
use crate::losses::{self, GenModes, LossBundle, LossWeights, PairBatch};
use crate::nets::convert::{images_to_tensor, maps_to_tensor};
use crate::nets::{Mode, ModelBundle, NetConfig};

pub const LOG_HEADER: &str = "step,img_rec,latent_rec,lbp,depth,gen_adv,disc,total";
pub const LOG_FILE: &str = "train_log.csv";
pub const PRETRAIN_LOG_FILE: &str = "pretrain_log.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const FINAL_CHECKPOINT: &str = "final.safetensors";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub net: NetConfig,
    pub batch_size: usize,
    pub lr: f64,
    pub pretrain_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weights: LossWeights,
    pub steps: u64,
    pub pretrain_epochs: usize,
    pub seed: u64,
    /// Steps between checkpoints; 0 disables intermediate checkpoints.
    pub checkpoint_interval: u64,
    /// Steps between progress callbacks.
    pub log_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            net: NetConfig::default(),
            batch_size: 4,
            lr: 1e-5,
            pretrain_lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            weights: LossWeights::default(),
            steps: 2000,
            pretrain_epochs: 10,
            seed: 0,
            checkpoint_interval: 500,
            log_interval: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        if self.batch_size < 2 || !self.batch_size.is_multiple_of(2) {
            return Err(Error::Config(format!("batch_size {} must be even and >= 2", self.batch_size)));
        }
        for (name, v) in [("lr", self.lr), ("pretrain_lr", self.pretrain_lr)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if self.log_interval == 0 {
            return Err(Error::Config("log_interval must be positive".into()));
        }
        self.weights.validate()
    }

    pub fn write_into(&self, c: &mut FlatConfig) {
        self.net.write_into(c);
        c.set("batch_size", self.batch_size);
        c.set("lr", self.lr);
        c.set("pretrain_lr", self.pretrain_lr);
        c.set("beta1", self.beta1);
        c.set("beta2", self.beta2);
        c.set("lambda", join_list(&self.weights.as_array()));
        c.set("steps", self.steps);
        c.set("pretrain_epochs", self.pretrain_epochs);
        c.set("seed", self.seed);
        c.set("checkpoint_interval", self.checkpoint_interval);
        c.set("log_interval", self.log_interval);
    }

    /// Consumes the training and architecture keys from `c`.
    pub fn take_from(c: &mut FlatConfig) -> Result<Self> {
        let d = Self::default();
        let cfg = Self {
            net: NetConfig::take_from(c)?,
            batch_size: c.take_or("batch_size", d.batch_size)?,
            lr: c.take_or("lr", d.lr)?,
            pretrain_lr: c.take_or("pretrain_lr", d.pretrain_lr)?,
            beta1: c.take_or("beta1", d.beta1)?,
            beta2: c.take_or("beta2", d.beta2)?,
            weights: LossWeights::from_array(c.take_array("lambda", d.weights.as_array())?),
            steps: c.take_or("steps", d.steps)?,
            pretrain_epochs: c.take_or("pretrain_epochs", d.pretrain_epochs)?,
            seed: c.take_or("seed", d.seed)?,
            checkpoint_interval: c.take_or("checkpoint_interval", d.checkpoint_interval)?,
            log_interval: c.take_or("log_interval", d.log_interval)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut c = FlatConfig::default();
        self.write_into(&mut c);
        c.to_text()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = FlatConfig::parse(text)?;
        let cfg = Self::take_from(&mut c)?;
        c.finish()?;
        Ok(cfg)
    }
}

/// A dataset held as stacked tensors: images (N,3,R,R), maps (N,R/8,R/8).
#[derive(Debug, Clone)]
pub struct TensorSet {
    pub images: Tensor,
    pub lbp: Tensor,
    pub depth: Tensor,
    pub face_depth: Tensor,
    pub labels: Vec<Label>,
}

impl TensorSet {
    pub fn from_samples(samples: &[ImageSample], dtype: DType) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Config("empty dataset".into()));
        }
        let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
        let lbp: Vec<_> = samples.iter().map(|s| &s.lbp_gt).collect();
        let depth: Vec<_> = samples.iter().map(|s| &s.depth_gt).collect();
        let face: Vec<_> = samples.iter().map(|s| &s.face_depth).collect();
        Ok(Self {
            images: images_to_tensor(&images, dtype)?,
            lbp: maps_to_tensor(&lbp, dtype)?,
            depth: maps_to_tensor(&depth, dtype)?,
            face_depth: maps_to_tensor(&face, dtype)?,
            labels: samples.iter().map(|s| s.label).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn resolution(&self) -> usize {
        self.images.dims()[2]
    }

    fn rows(t: &Tensor, idx: &[usize]) -> Result<Tensor> {
        let ids: Vec<u32> = idx.iter().map(|&i| i as u32).collect();
        let ids = Tensor::new(ids.as_slice(), t.device())?;
        Ok(t.index_select(&ids, 0)?)
    }

    pub fn images_at(&self, idx: &[usize]) -> Result<Tensor> {
        Self::rows(&self.images, idx)
    }

    pub fn depth_at(&self, idx: &[usize]) -> Result<Tensor> {
        Self::rows(&self.depth, idx)
    }

    pub fn pair_batch(&self, pair: &BatchPair) -> Result<PairBatch> {
        Ok(PairBatch {
            live: Self::rows(&self.images, &pair.live)?,
            spoof: Self::rows(&self.images, &pair.spoof)?,
            live_lbp: Self::rows(&self.lbp, &pair.live)?,
            live_depth: Self::rows(&self.depth, &pair.live)?,
            spoof_face_depth: Self::rows(&self.face_depth, &pair.spoof)?,
        })
    }
}

fn check_resolution(models: &ModelBundle, data: &TensorSet) -> Result<()> {
    if data.resolution() != models.config.resolution {
        return Err(Error::Config(format!(
            "data resolution {} differs from network resolution {}",
            data.resolution(),
            models.config.resolution
        )));
    }
    Ok(())
}

/// Mean-L1 regression of the depth net onto `depth_gt` (live: face depth,
/// spoof: zero). Returns the mean loss of each epoch.
pub fn pretrain_depth(models: &ModelBundle, data: &TensorSet, config: &TrainConfig) -> Result<Vec<f64>> {
    check_resolution(models, data)?;
    let mut opt = Adam::new(models.trainable_of(&["depth_net"]), config.pretrain_lr, config.beta1, config.beta2)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xdeb7_0000);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(config.pretrain_epochs);
    for _ in 0..config.pretrain_epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut count) = (0.0, 0usize);
        // a trailing singleton batch would make batch statistics degenerate
        for idx in order.chunks(config.batch_size).filter(|c| c.len() >= 2) {
            let pred = models.depth_map(&data.images_at(idx)?, Mode::TRAIN)?;
            let loss = losses::l1_mean(&pred, &data.depth_at(idx)?)?;
            let v = losses::to_f64(&loss)?;
            if !v.is_finite() {
                return Err(Error::Numeric(format!("depth pretraining loss became {v}")));
            }
            opt.step(&loss.backward()?)?;
            sum += v;
            count += 1;
        }
        history.push(if count == 0 { 0.0 } else { sum / count as f64 });
    }
    Ok(history)
}

/// Losses of one iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub losses: LossBundle,
}

impl StepRecord {
    pub fn csv_row(&self) -> String {
        let l = &self.losses;
        let disc = l.disc.map(|d| d.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step, l.img_rec, l.latent_rec, l.lbp, l.depth, l.gen_adv, disc, l.total
        )
    }
}

const META_KIND: &str = "kind";
const META_STEP: &str = "step";
const META_TRAIN: &str = "train_config";
const META_GEN_T: &str = "adam.gen.t";
const META_DISC_T: &str = "adam.disc.t";

pub struct Trainer {
    pub models: ModelBundle,
    pub config: TrainConfig,
    data: TensorSet,
    sampler: BalancedSampler,
    gen_opt: Adam,
    disc_opt: Adam,
    step: u64,
}

impl Trainer {
    pub fn new(models: ModelBundle, config: TrainConfig, data: TensorSet) -> Result<Self> {
        config.validate()?;
        if models.config != config.net {
            return Err(Error::Config("model architecture differs from the training config".into()));
        }
        check_resolution(&models, &data)?;
        let sampler = BalancedSampler::new(&data.labels, config.batch_size, config.seed)?;
        let gen_opt = Adam::new(models.generator_params(), config.lr, config.beta1, config.beta2)?;
        let disc_opt = Adam::new(models.discriminator_params(), config.lr, config.beta1, config.beta2)?;
        Ok(Self {
            models,
            config,
            data,
            sampler,
            gen_opt,
            disc_opt,
            step: 0,
        })
    }

    /// Restores models, optimizer moments and the step counter from a
    /// training checkpoint, and fast-forwards the sampler to match.
    pub fn resume(path: &Path, config: TrainConfig, data: TensorSet) -> Result<Self> {
        let ck = ModelBundle::load_checkpoint(path, Some(&config.net))?;
        let meta = |k: &str| -> Result<u64> {
            ck.metadata
                .get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Format(format!("checkpoint lacks `{k}`")))
        };
        let step = meta(META_STEP)?;
        let (gen_t, disc_t) = (meta(META_GEN_T)?, meta(META_DISC_T)?);
        let mut t = Self::new(ck.models, config, data)?;
        t.gen_opt.load_state("adam.gen", &ck.extra, gen_t)?;
        t.disc_opt.load_state("adam.disc", &ck.extra, disc_t)?;
        for _ in 0..step {
            t.sampler.next_batch();
        }
        t.step = step;
        Ok(t)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One discriminator update; returns its loss.
    pub fn disc_step(&mut self, batch: &PairBatch) -> Result<f64> {
        // the generator only supplies images here
        let swap = self.models.swap(&batch.live, &batch.spoof, Mode::TRAIN.fixed())?;
        let loss = losses::disc_loss(&self.models, &batch.real()?, &swap.generated, Mode::TRAIN)?;
        let v = losses::to_f64(&loss)?;
        if !v.is_finite() {
            return Err(Error::Numeric(format!("discriminator loss became {v} at step {}", self.step + 1)));
        }
        self.disc_opt.step(&loss.backward()?)?;
        Ok(v)
    }

    /// One update of encoder, decoder and LBP net.
    pub fn gen_step(&mut self, batch: &PairBatch) -> Result<LossBundle> {
        let terms = losses::generator_terms(&self.models, batch, GenModes::TRAIN)?;
        let total = terms.total(&self.config.weights)?;
        let bundle = losses::total_gen_loss(&terms.parts()?, &self.config.weights);
        if !bundle.is_finite() {
            return Err(Error::Numeric(format!("generator loss not finite at step {}: {bundle:?}", self.step + 1)));
        }
        self.gen_opt.step(&total.backward()?)?;
        Ok(bundle)
    }

    /// Draws the next balanced live/spoof batch from the sampler.
    pub fn next_batch(&mut self) -> Result<PairBatch> {
        let pair = self.sampler.next_batch();
        self.data.pair_batch(&pair)
    }

    pub fn train_step(&mut self) -> Result<StepRecord> {
        let batch = self.next_batch()?;
        let disc = self.disc_step(&batch)?;
        let mut losses = self.gen_step(&batch)?;
        losses.disc = Some(disc);
        self.step += 1;
        Ok(StepRecord { step: self.step, losses })
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut meta = BTreeMap::new();
        meta.insert(META_KIND.to_string(), "train".to_string());
        meta.insert(META_STEP.to_string(), self.step.to_string());
        meta.insert(META_TRAIN.to_string(), self.config.to_text());
        meta.insert(META_GEN_T.to_string(), self.gen_opt.steps().to_string());
        meta.insert(META_DISC_T.to_string(), self.disc_opt.steps().to_string());
        let mut extra = self.gen_opt.state_tensors("adam.gen");
        extra.extend(self.disc_opt.state_tensors("adam.disc"));
        self.models.save_checkpoint(path, &meta, &extra)
    }

    /// Runs until `config.steps`, appending to `out_dir/train_log.csv` and
    /// writing periodic checkpoints plus `final.safetensors`. On a non-finite
    /// loss a snapshot is written before the error is returned.
    pub fn run(&mut self, out_dir: &Path, mut progress: impl FnMut(&StepRecord)) -> Result<PathBuf> {
        let ck_dir = out_dir.join(CHECKPOINT_DIR);
        std::fs::create_dir_all(&ck_dir).map_err(|e| Error::io(&ck_dir, e))?;
        let mut log = open_log(&out_dir.join(LOG_FILE), self.step)?;
        while self.step < self.config.steps {
            let rec = match self.train_step() {
                Ok(r) => r,
                Err(Error::Numeric(msg)) => {
                    let snap = ck_dir.join(format!("abort_step{:06}.safetensors", self.step + 1));
                    self.save_checkpoint(&snap)?;
                    return Err(Error::Numeric(format!("{msg}; snapshot written to {}", snap.display())));
                }
                Err(e) => return Err(e),
            };
            writeln!(log, "{}", rec.csv_row()).map_err(|e| Error::io(out_dir, e))?;
            if rec.step % self.config.log_interval == 0 || rec.step == self.config.steps {
                log.flush().map_err(|e| Error::io(out_dir, e))?;
                progress(&rec);
            }
            if self.config.checkpoint_interval > 0 && rec.step % self.config.checkpoint_interval == 0 {
                log.flush().map_err(|e| Error::io(out_dir, e))?;
                self.save_checkpoint(&ck_dir.join(format!("step{:06}.safetensors", rec.step)))?;
            }
        }
        log.flush().map_err(|e| Error::io(out_dir, e))?;
        let last = out_dir.join(FINAL_CHECKPOINT);
        self.save_checkpoint(&last)?;
        Ok(last)
    }
}

/// Opens the loss log for appending after `step`, dropping any rows past
/// it (left over from an interrupted run) and writing the header if new.
fn open_log(path: &Path, step: u64) -> Result<std::io::BufWriter<File>> {
    let mut keep = vec![LOG_HEADER.to_string()];
    if step > 0 && path.is_file() {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        for line in BufReader::new(f).lines().skip(1) {
            let line = line.map_err(|e| Error::io(path, e))?;
            let s: u64 = line
                .split(',')
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Format(format!("malformed log row in {}", path.display())))?;
            if s <= step {
                keep.push(line);
            }
        }
    }
    let mut f = std::io::BufWriter::new(
        OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?,
    );
    for line in keep {
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(f)
}

/// Writes the per-epoch pretraining losses as `epoch,loss`.
pub fn write_pretrain_log(path: &Path, history: &[f64]) -> Result<()> {
    let mut text = String::from("epoch,loss\n");
    for (i, l) in history.iter().enumerate() {
        text.push_str(&format!("{},{}\n", i + 1, l));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Saves a bundle after depth pretraining.
pub fn save_pretrained(models: &ModelBundle, config: &TrainConfig, path: &Path) -> Result<()> {
    let mut meta = BTreeMap::new();
    meta.insert(META_KIND.to_string(), "pretrain".to_string());
    meta.insert(META_TRAIN.to_string(), config.to_text());
    models.save_checkpoint(path, &meta, &BTreeMap::new())
}

/// Outcome of [`train`].
#[derive(Debug)]
pub struct TrainOutcome {
    pub models: ModelBundle,
    pub pretrain_history: Vec<f64>,
    pub final_checkpoint: PathBuf,
}

/// Fresh models, depth pretraining, then the alternating loop.
pub fn train(data: TensorSet, config: &TrainConfig, out_dir: &Path, progress: impl FnMut(&StepRecord)) -> Result<TrainOutcome> {
    config.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let models = ModelBundle::new(&config.net, config.seed, data.images.dtype())?;
    let history = pretrain_depth(&models, &data, config)?;
    write_pretrain_log(&out_dir.join(PRETRAIN_LOG_FILE), &history)?;
    let mut trainer = Trainer::new(models, config.clone(), data)?;
    let final_checkpoint = trainer.run(out_dir, progress)?;
    Ok(TrainOutcome {
        models: trainer.models,
        pretrain_history: history,
        final_checkpoint,
    })
}
