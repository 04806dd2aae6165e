use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::DType;
use dfas_core::dataio::{generate_synthetic_dataset, load_dataset, open_split, ImageSample, Label, Split};
use dfas_core::eval::{
    build_report, eer_threshold, export_features, pca_2d, read_features, scatter_plot, score_samples, translate_pair,
    write_features, EvalReport,
};
use dfas_core::nets::ModelBundle;
use dfas_core::raster::RgbImage;
use dfas_core::trainer::{pretrain_depth, save_pretrained, write_pretrain_log, TensorSet, Trainer, PRETRAIN_LOG_FILE};
use dfas_core::{Error, Result};

use crate::run_config::{ColorBy, RunConfig};

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn load_split(root: &Path, split: Split, resolution: usize) -> Result<Vec<ImageSample>> {
    let manifest = open_split(root, split)?;
    load_dataset(&manifest, resolution)
}

fn load_models(cfg: &RunConfig) -> Result<ModelBundle> {
    let path = cfg.checkpoint_path();
    let ck = ModelBundle::load_checkpoint(&path, Some(&cfg.train.net))?;
    println!("loaded checkpoint {}", path.display());
    Ok(ck.models)
}

pub fn gen_data(cfg: &RunConfig) -> Result<()> {
    for m in generate_synthetic_dataset(&cfg.gen)? {
        println!(
            "{}: {} live, {} spoof -> {}",
            m.split,
            m.count(Label::Live),
            m.count(Label::Spoof),
            m.manifest_path().display()
        );
    }
    Ok(())
}

fn train_data(cfg: &RunConfig) -> Result<TensorSet> {
    let samples = load_split(&cfg.data_root, Split::Train, cfg.train.net.resolution)?;
    println!("train split: {} samples", samples.len());
    TensorSet::from_samples(&samples, DType::F32)
}

fn pretrain_into(models: &ModelBundle, data: &TensorSet, cfg: &RunConfig) -> Result<()> {
    let history = pretrain_depth(models, data, &cfg.train)?;
    for (i, l) in history.iter().enumerate() {
        println!("pretrain epoch {}/{} depth_l1={l:.6}", i + 1, history.len());
    }
    mkdir(&cfg.run_dir)?;
    write_pretrain_log(&cfg.run_dir.join(PRETRAIN_LOG_FILE), &history)?;
    save_pretrained(models, &cfg.train, &cfg.depth_checkpoint_path())?;
    println!("wrote {}", cfg.depth_checkpoint_path().display());
    Ok(())
}

pub fn pretrain(cfg: &RunConfig) -> Result<()> {
    let data = train_data(cfg)?;
    let models = ModelBundle::new(&cfg.train.net, cfg.train.seed, DType::F32)?;
    pretrain_into(&models, &data, cfg)
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let data = train_data(cfg)?;
    let mut trainer = if let Some(resume) = &cfg.resume {
        let t = Trainer::resume(resume, cfg.train.clone(), data)?;
        println!("resumed from {} at step {}", resume.display(), t.step_count());
        t
    } else {
        let models = ModelBundle::new(&cfg.train.net, cfg.train.seed, DType::F32)?;
        let depth = cfg.depth_checkpoint_path();
        if depth.is_file() {
            let ck = ModelBundle::load_checkpoint(&depth, Some(&cfg.train.net))?;
            models.copy_network_from(&ck.models, "depth_net")?;
            println!("depth net from {}", depth.display());
        } else {
            println!("no pretrained depth net at {}; pretraining now", depth.display());
            pretrain_into(&models, &data, cfg)?;
        }
        Trainer::new(models, cfg.train.clone(), data)?
    };
    let steps = cfg.train.steps;
    let last = trainer.run(&cfg.run_dir, |r| {
        let l = &r.losses;
        println!(
            "step {}/{steps} total={:.5} img_rec={:.5} latent_rec={:.5} lbp={:.5} depth={:.5} gen_adv={:.5} disc={:.5}",
            r.step,
            l.total,
            l.img_rec,
            l.latent_rec,
            l.lbp,
            l.depth,
            l.gen_adv,
            l.disc.unwrap_or(f64::NAN)
        );
    })?;
    println!("wrote {}", last.display());
    Ok(())
}

fn print_report(r: &EvalReport) {
    let m = &r.metrics;
    println!(
        "{}: threshold={:.6} ({}) APCER={:.2}% BPCER={:.2}% ACER={:.2}% HTER={:.2}% live_mean={:.5} spoof_mean={:.5}",
        r.split, r.threshold, r.threshold_source, m.apcer, m.bpcer, m.acer, m.hter, r.mean_live_score, r.mean_spoof_score
    );
}

fn write_report(r: &EvalReport, dir: &Path, stem: &str) -> Result<()> {
    mkdir(dir)?;
    let json = dir.join(format!("{stem}_report.json"));
    let csv = dir.join(format!("{stem}_scores.csv"));
    r.write_json(&json)?;
    r.write_scores_csv(&csv)?;
    println!("wrote {} and {}", json.display(), csv.display());
    Ok(())
}

/// Threshold at the EER point of the configured threshold split of `root`.
fn threshold_from(cfg: &RunConfig, models: &ModelBundle, root: &Path) -> Result<(f64, EvalReport)> {
    let samples = load_split(root, cfg.threshold_split, cfg.train.net.resolution)?;
    let scored = score_samples(models, &samples, cfg.fusion)?;
    let thr = eer_threshold(&scored)?;
    let source = format!("{}-eer", cfg.threshold_split);
    let report = build_report(cfg.threshold_split.as_str(), scored, thr, &source, cfg.fusion)?;
    Ok((thr, report))
}

pub fn eval(cfg: &RunConfig) -> Result<()> {
    let models = load_models(cfg)?;
    let (thr, dev_report) = threshold_from(cfg, &models, &cfg.data_root)?;
    print_report(&dev_report);
    write_report(&dev_report, &cfg.eval_dir(), cfg.threshold_split.as_str())?;

    let samples = load_split(&cfg.data_root, cfg.eval_split, cfg.train.net.resolution)?;
    let scored = score_samples(&models, &samples, cfg.fusion)?;
    let report = build_report(cfg.eval_split.as_str(), scored, thr, &dev_report.threshold_source, cfg.fusion)?;
    print_report(&report);
    write_report(&report, &cfg.eval_dir(), cfg.eval_split.as_str())?;

    let features = export_features(&models, &samples, cfg.include_content)?;
    let path = cfg.features_path(cfg.eval_split);
    write_features(&path, &features)?;
    println!("wrote {} ({} rows)", path.display(), features.len());
    Ok(())
}

pub fn cross_eval(cfg: &RunConfig) -> Result<()> {
    let target = cfg
        .cross_root
        .as_ref()
        .ok_or_else(|| Error::Config("cross-eval needs `cross_root`".into()))?;
    let models = load_models(cfg)?;
    let (thr, _) = threshold_from(cfg, &models, &cfg.data_root)?;
    let samples = load_split(target, cfg.cross_split, cfg.train.net.resolution)?;
    let scored = score_samples(&models, &samples, cfg.fusion)?;
    let source = format!("source-{}-eer", cfg.threshold_split);
    let report = build_report(&format!("cross-{}", cfg.cross_split), scored, thr, &source, cfg.fusion)?;
    print_report(&report);
    write_report(&report, &cfg.eval_dir(), "cross")
}

/// Explicit images, or the first `translate_pairs` live/spoof pairs of the
/// evaluation split.
pub fn translate(cfg: &RunConfig, live: Option<&Path>, spoof: Option<&Path>) -> Result<()> {
    let models = load_models(cfg)?;
    let r = cfg.train.net.resolution;
    let pairs: Vec<(String, RgbImage, RgbImage)> = match (live, spoof) {
        (Some(a), Some(b)) => vec![("pair00".into(), RgbImage::load_png(a, r)?, RgbImage::load_png(b, r)?)],
        (None, None) => {
            let samples = load_split(&cfg.data_root, cfg.eval_split, r)?;
            let lives = samples.iter().filter(|s| s.label == Label::Live);
            let spoofs = samples.iter().filter(|s| s.label == Label::Spoof);
            lives
                .zip(spoofs)
                .take(cfg.translate_pairs)
                .enumerate()
                .map(|(i, (a, b))| (format!("pair{i:02}"), a.image.clone(), b.image.clone()))
                .collect()
        }
        _ => return Err(Error::Config("--live and --spoof must be given together".into())),
    };
    if pairs.is_empty() {
        return Err(Error::Config("no live/spoof pairs to translate".into()));
    }
    let dir = cfg.run_dir.join("translations");
    mkdir(&dir)?;
    let mut summary = BTreeMap::new();
    for (name, a, b) in &pairs {
        let t = translate_pair(&models, a, b)?;
        let files = t.write(&dir, name)?;
        let depth_mean = |i: usize| t.depth_maps[i].mean_abs() as f64;
        let entry = serde_json::json!({
            "delta_means": t.delta_means()?,
            "depth_mean_a_b": depth_mean(2),
            "depth_mean_b_a": depth_mean(3),
        });
        println!(
            "{name}: {} files, depth(A_b)={:.5} depth(B_a)={:.5}",
            files.len(),
            depth_mean(2),
            depth_mean(3)
        );
        summary.insert(name.clone(), entry);
    }
    let path = dir.join("summary.json");
    let text = serde_json::to_string_pretty(&summary).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    println!("wrote {}", path.display());
    Ok(())
}

pub fn plot(cfg: &RunConfig, features: Option<PathBuf>) -> Result<()> {
    let path = features.unwrap_or_else(|| cfg.features_path(cfg.eval_split));
    let rows = read_features(&path)?;
    let points = pca_2d(&rows.iter().map(|r| r.features.clone()).collect::<Vec<_>>())?;
    let groups: Vec<String> = rows
        .iter()
        .map(|r| match cfg.plot_color {
            ColorBy::Label => r.label.as_str().to_string(),
            ColorBy::Attack => r.attack_type.as_str().to_string(),
            ColorBy::Device => r.device.clone(),
        })
        .collect();
    let dir = cfg.run_dir.join("plots");
    mkdir(&dir)?;
    let out = dir.join(format!("features_{}.png", cfg.plot_color));
    let colours = scatter_plot(&points, &groups, &out, 512)?;
    for (g, c) in colours {
        println!("legend {g}: rgb({},{},{})", c[0], c[1], c[2]);
    }
    println!("wrote {}", out.display());
    Ok(())
}
