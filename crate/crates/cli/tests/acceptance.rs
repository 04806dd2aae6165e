//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the lines reach stdout uncaptured.
//! `DFAS_ACCEPT=3,7` limits the run to the listed criteria.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor};
use dfas_core::dataio::{generate_synthetic_dataset, load_dataset, open_split, BatchPair, ClassCounts, GenConfig, Label, Split};
use dfas_core::eval::{build_report, compute_metrics, eer_threshold, score_samples, Fusion};
use dfas_core::losses::{disc_loss, generator_terms, total_gen_loss, GenModes, LossParts, LossWeights};
use dfas_core::nets::{Mode, ModelBundle, NetConfig, NETWORKS};
use dfas_core::raster::GrayMap;
use dfas_core::texture::lbp_code_map;
use dfas_core::trainer::{train, TensorSet, TrainConfig, Trainer, LOG_FILE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LBP_LIMIT: Duration = Duration::from_secs(10);
const GRAD_LIMIT: Duration = Duration::from_secs(5 * 60);
const GRAD_STEP: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-3;
/// Denominator floor of the relative error, so gradients at roundoff level
/// are compared absolutely.
const GRAD_FLOOR: f64 = 1e-6;
const GRAD_PER_NETWORK: usize = 4;
const DISC_TOL: f64 = 1e-9;
const ISOLATION_STEPS: u64 = 500;
const DETERMINISM_STEPS: u64 = 200;
const E2E_LIMIT: Duration = Duration::from_secs(30 * 60);
const E2E_MAX_ACER: f64 = 5.0;
const E2E_STEPS: u64 = 1200;
const E2E_PRETRAIN_EPOCHS: usize = 10;
const DIRECTION_PAIRS: usize = 50;

type Criterion = fn() -> Result<Outcome, String>;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Result<Outcome, String> {
    Ok(Outcome {
        pass,
        detail: detail.into(),
    })
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn tiny_dataset(root: &Path, resolution: usize, per_class: usize, seed: u64) -> Result<TensorSet, String> {
    let cfg = GenConfig {
        root: root.to_path_buf(),
        resolution,
        train: ClassCounts {
            live: per_class,
            spoof: per_class,
        },
        dev: ClassCounts { live: 2, spoof: 2 },
        test: ClassCounts { live: 2, spoof: 2 },
        devices: 2,
        seed,
    };
    generate_synthetic_dataset(&cfg).map_err(err)?;
    let samples = load_dataset(&open_split(root, Split::Train).map_err(err)?, resolution).map_err(err)?;
    TensorSet::from_samples(&samples, DType::F32).map_err(err)
}

fn tiny_train_config(resolution: usize, steps: u64) -> TrainConfig {
    TrainConfig {
        net: NetConfig::tiny(resolution),
        batch_size: 4,
        lr: 1e-3,
        pretrain_lr: 1e-3,
        steps,
        pretrain_epochs: 1,
        checkpoint_interval: 0,
        log_interval: 1,
        seed: 5,
        ..TrainConfig::default()
    }
}

// ---- 1 -------------------------------------------------------------------

/// Straight from the definition: compare each of the 8 neighbours, clockwise
/// from the top-left, with indices clamped into the image.
fn oracle_lbp(img: &[Vec<f32>]) -> Vec<Vec<u8>> {
    let h = img.len() as i64;
    let w = img[0].len() as i64;
    let px = |y: i64, x: i64| img[y.clamp(0, h - 1) as usize][x.clamp(0, w - 1) as usize];
    let ring = [(-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1)];
    let mut out = vec![vec![0u8; w as usize]; h as usize];
    for y in 0..h {
        for x in 0..w {
            let mut code = 0u32;
            for (k, (dy, dx)) in ring.iter().enumerate() {
                if px(y + dy, x + dx) >= px(y, x) {
                    code += 1 << k;
                }
            }
            out[y as usize][x as usize] = code as u8;
        }
    }
    out
}

fn lbp_oracle() -> Result<Outcome, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let start = Instant::now();
    let mut mismatches = 0;
    for i in 0..100 {
        // every fourth image is quantized so ties are exercised
        let img: Vec<Vec<f32>> = (0..16)
            .map(|_| {
                (0..16)
                    .map(|_| {
                        let v: f32 = rng.random();
                        if i % 4 == 0 {
                            (v * 4.0).floor() / 4.0
                        } else {
                            v
                        }
                    })
                    .collect()
            })
            .collect();
        let gray = GrayMap::from_fn(16, 16, |y, x| img[y][x]);
        let codes = lbp_code_map(&gray).map_err(err)?;
        let expect = oracle_lbp(&img);
        for (y, row) in expect.iter().enumerate() {
            for (x, want) in row.iter().enumerate() {
                mismatches += usize::from(codes.get(y, x) != *want);
            }
        }
    }
    let took = start.elapsed();
    outcome(
        mismatches == 0 && took < LBP_LIMIT,
        format!("100 random 16x16 images, {mismatches} mismatching pixels, {took:.2?} (limit {LBP_LIMIT:?})"),
    )
}

// ---- 2 -------------------------------------------------------------------

fn metrics_oracle() -> Result<Outcome, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut exact, mut identity_err) = (0, 0.0f64);
    for _ in 0..1000 {
        let n = rng.random_range(2..60);
        let mut labels: Vec<Label> = (0..n).map(|_| if rng.random_bool(0.5) { Label::Live } else { Label::Spoof }).collect();
        labels[0] = Label::Live;
        labels[1] = Label::Spoof;
        let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0..20) as f64) / 19.0).collect();
        let thr = (rng.random_range(0..21) as f64) / 20.0;
        let m = compute_metrics(&scores, &labels, thr).map_err(err)?;

        let (mut live, mut spoof, mut live_rejected, mut spoof_accepted) = (0usize, 0usize, 0usize, 0usize);
        for (s, l) in scores.iter().zip(&labels) {
            let accepted = *s >= thr;
            match l {
                Label::Live => {
                    live += 1;
                    if !accepted {
                        live_rejected += 1;
                    }
                }
                Label::Spoof => {
                    spoof += 1;
                    if accepted {
                        spoof_accepted += 1;
                    }
                }
            }
        }
        let apcer = 100.0 * spoof_accepted as f64 / spoof as f64;
        let bpcer = 100.0 * live_rejected as f64 / live as f64;
        let far = apcer;
        let frr = bpcer;
        if m.apcer == apcer && m.bpcer == bpcer && m.acer == (apcer + bpcer) / 2.0 && m.hter == (far + frr) / 2.0 {
            exact += 1;
        }
        identity_err = identity_err.max((m.acer - (m.apcer + m.bpcer) / 2.0).abs());
    }
    outcome(
        exact == 1000 && identity_err <= f64::EPSILON * 100.0,
        format!("{exact}/1000 sets match the counting oracle exactly; max |ACER-(APCER+BPCER)/2| = {identity_err:e}"),
    )
}

// ---- 3 -------------------------------------------------------------------

fn gradient_check() -> Result<Outcome, String> {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(err)?;
    let res = 16;
    let cfg = GenConfig {
        root: dir.path().to_path_buf(),
        // the generator draws at 32 or more; loading resizes to 16
        resolution: 32,
        train: ClassCounts { live: 2, spoof: 2 },
        dev: ClassCounts { live: 1, spoof: 1 },
        test: ClassCounts { live: 1, spoof: 1 },
        devices: 1,
        seed: 9,
    };
    generate_synthetic_dataset(&cfg).map_err(err)?;
    let samples = load_dataset(&open_split(dir.path(), Split::Train).map_err(err)?, res).map_err(err)?;
    let data = TensorSet::from_samples(&samples, DType::F64).map_err(err)?;
    let of = |l: Label| data.labels.iter().enumerate().filter(|(_, x)| **x == l).map(|(i, _)| i).collect::<Vec<_>>();
    let batch = data
        .pair_batch(&BatchPair {
            live: of(Label::Live),
            spoof: of(Label::Spoof),
        })
        .map_err(err)?;

    let net = NetConfig::tiny(res);
    let widest = [
        net.stem_channels.iter().max(),
        net.lbp_channels.iter().max(),
        net.depth_block.iter().max(),
        net.disc_channels.iter().max(),
    ]
    .into_iter()
    .flatten()
    .chain([&net.branch_channels, &net.liveness_channels, &net.content_channels])
    .max()
    .copied()
    .unwrap_or(0);
    let models = ModelBundle::new(&net, 3, DType::F64).map_err(err)?;
    let weights = LossWeights::default();
    let objective = || -> Result<Tensor, String> {
        let terms = generator_terms(&models, &batch, GenModes::PROBE).map_err(err)?;
        terms.total(&weights).map_err(err)
    };
    let grads = objective()?.backward().map_err(err)?;

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut checked, mut worst, mut worst_name) = (0, 0.0f64, String::new());
    let mut covered = Vec::new();
    for network in NETWORKS {
        let vars = models.trainable_of(&[network]);
        for _ in 0..GRAD_PER_NETWORK {
            let (name, var) = &vars[rng.random_range(0..vars.len())];
            let n = var.elem_count();
            let idx = rng.random_range(0..n);
            let orig: Vec<f64> = var.as_tensor().flatten_all().map_err(err)?.to_vec1().map_err(err)?;
            let probe = |delta: f64| -> Result<f64, String> {
                let mut v = orig.clone();
                v[idx] += delta;
                var.set(&Tensor::from_vec(v, var.dims(), &Device::Cpu).map_err(err)?).map_err(err)?;
                objective()?.to_scalar::<f64>().map_err(err)
            };
            let numeric = (probe(GRAD_STEP)? - probe(-GRAD_STEP)?) / (2.0 * GRAD_STEP);
            var.set(&Tensor::from_vec(orig, var.dims(), &Device::Cpu).map_err(err)?).map_err(err)?;
            let analytic = match grads.get(var) {
                Some(g) => g.flatten_all().map_err(err)?.to_vec1::<f64>().map_err(err)?[idx],
                None => 0.0,
            };
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR);
            if rel >= worst {
                worst = rel;
                worst_name = format!("{name}[{idx}] analytic {analytic:.6e} numeric {numeric:.6e}");
            }
            checked += 1;
        }
        covered.push(network);
    }
    let took = start.elapsed();
    outcome(
        checked >= 20 && worst < GRAD_TOL && took < GRAD_LIMIT && widest <= 8,
        format!(
            "{checked} parameters over {} networks (res {res}, max width {widest}, f64, step {GRAD_STEP:e}); worst rel err {worst:.2e} at {worst_name}; {took:.1?} (limit {GRAD_LIMIT:?})",
            covered.len()
        ),
    )
}

// ---- 4 -------------------------------------------------------------------

fn loss_closed_forms() -> Result<Outcome, String> {
    let models = ModelBundle::new(&NetConfig::tiny(32), 1, DType::F64).map_err(err)?;
    for d in [&models.disc1, &models.disc2] {
        d.fc.weight.set(&d.fc.weight.as_tensor().zeros_like().map_err(err)?).map_err(err)?;
        d.fc.bias.set(&d.fc.bias.as_tensor().zeros_like().map_err(err)?).map_err(err)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut image = |n: usize| -> Result<Tensor, String> {
        let v: Vec<f64> = (0..n * 3 * 32 * 32).map(|_| rng.random()).collect();
        Tensor::from_vec(v, (n, 3, 32, 32), &Device::Cpu).map_err(err)
    };
    let d = disc_loss(&models, &image(4)?, &image(8)?, Mode::EVAL)
        .map_err(err)?
        .to_scalar::<f64>()
        .map_err(err)?;
    let expect = 4.0 * std::f64::consts::LN_2;
    let unit = LossParts {
        img_rec: 1.0,
        latent_rec: 1.0,
        lbp: 1.0,
        depth: 1.0,
        gen_adv: 1.0,
    };
    let weights = LossWeights::from_array([10.0, 1.0, 1.0, 2.0]);
    let total = total_gen_loss(&unit, &weights).total;
    outcome(
        (d - expect).abs() <= DISC_TOL && total == 15.0 && LossWeights::default() == weights,
        format!("disc loss with D=0.5 is {d:.12} vs 4 ln 2 = {expect:.12}; unit-part total {total} (expect 15)"),
    )
}

// ---- 5 -------------------------------------------------------------------

fn isolation() -> Result<Outcome, String> {
    let dir = tempfile::tempdir().map_err(err)?;
    let data = tiny_dataset(dir.path(), 32, 6, 8)?;
    let cfg = tiny_train_config(32, ISOLATION_STEPS);
    let models = ModelBundle::new(&cfg.net, cfg.seed, DType::F32).map_err(err)?;
    let mut t = Trainer::new(models, cfg, data).map_err(err)?;
    let hashes = |t: &Trainer, nets: &[&str]| -> Result<Vec<String>, String> {
        nets.iter().map(|n| t.models.param_hash(n).map_err(err)).collect()
    };
    let gen = ["encoder", "decoder", "lbp_net"];
    let disc = ["disc1", "disc2"];
    let depth0 = t.models.param_hash("depth_net").map_err(err)?;
    let (mut depth_changed, mut disc_touched_gen, mut gen_touched_disc, mut idle) = (0, 0, 0, 0);
    for _ in 0..ISOLATION_STEPS {
        let batch = t.next_batch().map_err(err)?;
        let (g0, d0) = (hashes(&t, &gen)?, hashes(&t, &disc)?);
        t.disc_step(&batch).map_err(err)?;
        let (g1, d1) = (hashes(&t, &gen)?, hashes(&t, &disc)?);
        t.gen_step(&batch).map_err(err)?;
        let (g2, d2) = (hashes(&t, &gen)?, hashes(&t, &disc)?);
        disc_touched_gen += usize::from(g1 != g0);
        gen_touched_disc += usize::from(d2 != d1);
        idle += usize::from(d1 == d0 || g2 == g1);
        depth_changed += usize::from(t.models.param_hash("depth_net").map_err(err)? != depth0);
    }
    outcome(
        depth_changed == 0 && disc_touched_gen == 0 && gen_touched_disc == 0 && idle == 0,
        format!(
            "{ISOLATION_STEPS} steps: depth-net hash changed after {depth_changed} steps; disc steps changed generator {disc_touched_gen} times; gen steps changed discriminators {gen_touched_disc} times; {idle} steps updated nothing"
        ),
    )
}

// ---- 6 -------------------------------------------------------------------

fn determinism() -> Result<Outcome, String> {
    let dir = tempfile::tempdir().map_err(err)?;
    let data = tiny_dataset(&dir.path().join("data"), 32, 6, 10)?;
    let cfg = tiny_train_config(32, DETERMINISM_STEPS);
    let mut logs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        train(data.clone(), &cfg, &out, |_| {}).map_err(err)?;
        logs.push(std::fs::read_to_string(out.join(LOG_FILE)).map_err(err)?);
    }
    let rows = logs[0].lines().count().saturating_sub(1);
    outcome(
        logs[0] == logs[1] && rows as u64 == DETERMINISM_STEPS,
        format!("two single-threaded {DETERMINISM_STEPS}-step runs: {rows} log rows, logs identical: {}", logs[0] == logs[1]),
    )
}

// ---- 7, 8 ----------------------------------------------------------------

fn desk_config() -> TrainConfig {
    TrainConfig {
        net: NetConfig {
            resolution: 64,
            stem_channels: [16, 32, 64],
            branch_channels: 32,
            liveness_channels: 32,
            content_channels: 32,
            lbp_channels: [48, 32, 16],
            depth_stem: 16,
            depth_block: [16, 24, 16],
            depth_head: [16, 8],
            disc_channels: [16, 32, 64],
        },
        batch_size: 8,
        lr: 4e-4,
        pretrain_lr: 1e-3,
        // default ratios, ten times larger next to the adversarial term
        weights: LossWeights {
            image_rec: 100.0,
            latent_rec: 10.0,
            depth: 10.0,
            lbp: 20.0,
        },
        steps: E2E_STEPS,
        pretrain_epochs: E2E_PRETRAIN_EPOCHS,
        checkpoint_interval: 0,
        log_interval: 50,
        seed: 1,
        ..TrainConfig::default()
    }
}

struct EndToEnd {
    models: ModelBundle,
    root: PathBuf,
    _dir: tempfile::TempDir,
}

fn end_to_end() -> Result<(Outcome, EndToEnd), String> {
    let dir = tempfile::tempdir().map_err(err)?;
    let root = dir.path().join("data");
    let cfg = desk_config();
    let gen = GenConfig {
        root: root.clone(),
        resolution: 64,
        train: ClassCounts { live: 200, spoof: 200 },
        dev: ClassCounts { live: 50, spoof: 50 },
        test: ClassCounts { live: 100, spoof: 100 },
        devices: 3,
        seed: 1,
    };
    generate_synthetic_dataset(&gen).map_err(err)?;
    let load = |s: Split| load_dataset(&open_split(&root, s).map_err(err)?, 64).map_err(err);
    let train_set = TensorSet::from_samples(&load(Split::Train)?, DType::F32).map_err(err)?;

    let start = Instant::now();
    let trained = train(train_set, &cfg, &dir.path().join("run"), |r| {
        if r.step % 100 == 0 {
            eprintln!("  [7] step {} total {:.4}", r.step, r.losses.total);
        }
    })
    .map_err(err)?;
    let took = start.elapsed();

    let dev = score_samples(&trained.models, &load(Split::Dev)?, Fusion::Average).map_err(err)?;
    let thr = eer_threshold(&dev).map_err(err)?;
    let test = score_samples(&trained.models, &load(Split::Test)?, Fusion::Average).map_err(err)?;
    let report = build_report("test", test, thr, "dev-eer", Fusion::Average).map_err(err)?;
    let m = report.metrics;
    let pass = took <= E2E_LIMIT && m.acer <= E2E_MAX_ACER && report.mean_live_score > report.mean_spoof_score;
    let o = Outcome {
        pass,
        detail: format!(
            "400/100/200 at 64x64, {} steps after {} pretrain epochs in {:.1} min (limit 30); test ACER {:.2}% (APCER {:.2}%, BPCER {:.2}%, limit {E2E_MAX_ACER}%) at dev-EER threshold {:.5}; mean live {:.5} vs spoof {:.5}",
            cfg.steps,
            cfg.pretrain_epochs,
            took.as_secs_f64() / 60.0,
            m.acer,
            m.apcer,
            m.bpcer,
            thr,
            report.mean_live_score,
            report.mean_spoof_score
        ),
    };
    Ok((
        o,
        EndToEnd {
            models: trained.models,
            root,
            _dir: dir,
        },
    ))
}

fn direction(run: &EndToEnd) -> Result<Outcome, String> {
    let test = load_dataset(&open_split(&run.root, Split::Test).map_err(err)?, 64).map_err(err)?;
    let set = TensorSet::from_samples(&test, DType::F32).map_err(err)?;
    let of = |l: Label| -> Vec<usize> {
        set.labels
            .iter()
            .enumerate()
            .filter(|(_, x)| **x == l)
            .map(|(i, _)| i)
            .take(DIRECTION_PAIRS)
            .collect()
    };
    let (live, spoof) = (of(Label::Live), of(Label::Spoof));
    if live.len() < DIRECTION_PAIRS || spoof.len() < DIRECTION_PAIRS {
        return Err(format!("need {DIRECTION_PAIRS} pairs, have {} live / {} spoof", live.len(), spoof.len()));
    }
    let m = &run.models;
    let swap = m
        .swap(&set.images_at(&live).map_err(err)?, &set.images_at(&spoof).map_err(err)?, Mode::EVAL)
        .map_err(err)?;
    let mean_depth = |t: Tensor| -> Result<f64, String> {
        m.depth_map(&t, Mode::EVAL)
            .and_then(|d| Ok(d.mean_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?))
            .map_err(err)
    };
    let a_b = mean_depth(swap.a_b().map_err(err)?)?;
    let b_a = mean_depth(swap.b_a().map_err(err)?)?;
    outcome(
        b_a > a_b,
        format!("{DIRECTION_PAIRS} held-out test pairs: mean depth on B_a {b_a:.5} vs A_b {a_b:.5}"),
    )
}

// ---- 9 -------------------------------------------------------------------

fn dfas(config: &Path, args: &[&str]) -> Result<std::process::Output, String> {
    Command::new(env!("CARGO_BIN_EXE_dfas"))
        .arg("-c")
        .arg(config)
        .args(args)
        .env_remove("LD_SEED")
        .output()
        .map_err(err)
}

const SMOKE_CONFIG: &str = "\
data_root=data
run_dir=run
resolution=32
train_live=8
train_spoof=8
dev_live=4
dev_spoof=4
test_live=4
test_spoof=4
devices=2
stem_channels=4,6,8
branch_channels=8
liveness_channels=4
content_channels=4
lbp_channels=8,6,4
depth_stem=4
depth_block=4,6,4
depth_head=6,4
disc_channels=4,6,8
batch_size=4
lr=1e-3
pretrain_lr=1e-3
pretrain_epochs=1
steps=4
checkpoint_interval=2
log_interval=1
translate_pairs=2
seed=3
";

fn all_finite(v: &serde_json::Value) -> bool {
    match v {
        serde_json::Value::Number(n) => n.as_f64().is_some_and(f64::is_finite),
        serde_json::Value::Array(a) => a.iter().all(all_finite),
        serde_json::Value::Object(o) => o.values().all(all_finite),
        _ => true,
    }
}

fn cli_smoke() -> Result<Outcome, String> {
    let dir = tempfile::tempdir().map_err(err)?;
    let cfg = dir.path().join("smoke.cfg");
    std::fs::write(&cfg, SMOKE_CONFIG).map_err(err)?;
    let mut problems = Vec::new();
    for cmd in ["gen-data", "pretrain-depth", "train", "eval", "translate", "plot"] {
        let out = dfas(&cfg, &[cmd])?;
        if !out.status.success() {
            problems.push(format!("{cmd} exited {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr).trim()));
            break;
        }
        if !String::from_utf8_lossy(&out.stdout).starts_with("# resolved config") {
            problems.push(format!("{cmd} did not print the resolved config"));
        }
    }
    let run = dir.path().join("run");
    let report: serde_json::Value = std::fs::read_to_string(run.join("eval/test_report.json"))
        .map_err(err)
        .and_then(|t| serde_json::from_str(&t).map_err(err))
        .unwrap_or(serde_json::Value::Null);
    let metrics_ok = report.get("metrics").is_some_and(|m| ["apcer", "bpcer", "acer", "hter"].iter().all(|k| m.get(k).is_some())) && all_finite(&report);
    if !metrics_ok {
        problems.push("test report missing or has non-finite metrics".into());
    }
    let listing: Vec<String> = std::fs::read_dir(run.join("translations"))
        .map(|rd| rd.filter_map(|e| e.ok()).map(|e| e.file_name().to_string_lossy().into_owned()).collect())
        .unwrap_or_default();
    let pngs = listing.iter().filter(|f| f.ends_with(".png")).count();
    let deltas = listing.iter().filter(|f| f.contains("_delta_") && f.ends_with(".png")).count();
    if pngs == 0 || deltas == 0 {
        problems.push(format!("translations: {pngs} PNGs, {deltas} delta maps"));
    }
    let scatter = run.join("plots/features_label.png");
    if !scatter.is_file() {
        problems.push("feature scatter missing".into());
    }

    // error paths
    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, SMOKE_CONFIG.replace("resolution=32", "resolution=63")).map_err(err)?;
    let bad_code = dfas(&bad, &["gen-data"])?.status.code();
    let missing = dir.path().join("missing.cfg");
    std::fs::write(&missing, format!("{SMOKE_CONFIG}checkpoint=nowhere.safetensors\n")).map_err(err)?;
    let missing_code = dfas(&missing, &["eval"])?.status.code();
    let help_code = Command::new(env!("CARGO_BIN_EXE_dfas")).arg("--help").output().map_err(err)?.status.code();
    if bad_code != Some(2) || missing_code != Some(4) || help_code != Some(0) {
        problems.push(format!(
            "exit codes: resolution 63 -> {bad_code:?} (want 2), missing checkpoint -> {missing_code:?} (want 4), --help -> {help_code:?} (want 0)"
        ));
    }
    let detail = if problems.is_empty() {
        format!("six subcommands exit 0; report metrics finite; {pngs} translation PNGs ({deltas} delta maps); scatter written; exit codes 2/4/0 on bad resolution, missing checkpoint, help")
    } else {
        problems.join("; ")
    };
    outcome(problems.is_empty(), detail)
}

// --------------------------------------------------------------------------

fn selected() -> Option<Vec<usize>> {
    let v = std::env::var("DFAS_ACCEPT").ok()?;
    Some(v.split(',').filter_map(|s| s.trim().parse().ok()).collect())
}

fn guarded<T>(f: impl FnOnce() -> Result<T, String>) -> Result<T, String> {
    match std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    }
}

fn main() {
    // one thread everywhere, so the determinism criterion means what it says
    std::env::set_var("RAYON_NUM_THREADS", "1");
    let only = selected();
    let wanted = |n: usize| only.as_ref().is_none_or(|o| o.contains(&n));
    let mut results: Vec<(usize, &str, Result<Outcome, String>)> = Vec::new();
    let mut report = |n: usize, name: &'static str, r: Result<Outcome, String>| {
        let line = match &r {
            Ok(o) => format!("{} criterion {n} ({name}): {}", if o.pass { "PASS" } else { "FAIL" }, o.detail),
            Err(e) => format!("FAIL criterion {n} ({name}): error: {e}"),
        };
        println!("{line}");
        results.push((n, name, r));
    };

    let simple: [(usize, &'static str, Criterion); 6] = [
        (1, "LBP oracle", lbp_oracle),
        (2, "metrics oracle", metrics_oracle),
        (3, "gradient check", gradient_check),
        (4, "loss closed forms", loss_closed_forms),
        (5, "frozen depth net and step isolation", isolation),
        (6, "determinism", determinism),
    ];
    for (n, name, f) in simple {
        if wanted(n) {
            report(n, name, guarded(f));
        }
    }
    if wanted(7) || wanted(8) {
        match guarded(end_to_end) {
            Ok((o, run)) => {
                if wanted(7) {
                    report(7, "synthetic end-to-end efficacy", Ok(o));
                }
                if wanted(8) {
                    report(8, "disentanglement direction", guarded(|| direction(&run)));
                }
            }
            Err(e) => {
                if wanted(7) {
                    report(7, "synthetic end-to-end efficacy", Err(e.clone()));
                }
                if wanted(8) {
                    report(8, "disentanglement direction", Err(format!("end-to-end run failed: {e}")));
                }
            }
        }
    }
    if wanted(9) {
        report(9, "CLI smoke pipeline", guarded(cli_smoke));
    }

    let failed: Vec<usize> = results
        .iter()
        .filter(|(_, _, r)| !matches!(r, Ok(o) if o.pass))
        .map(|(n, _, _)| *n)
        .collect();
    println!("acceptance: {} of {} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failed: {failed:?}");
        std::process::exit(1);
    }
}
