use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::*;
use crate::dataio::AttackType;
use crate::raster::RgbImage;

use Label::{Live, Spoof};

fn counting_oracle(scores: &[f64], labels: &[Label], thr: f64) -> (f64, f64) {
    let mut fa = 0;
    let mut ns = 0;
    let mut fr = 0;
    let mut nl = 0;
    for i in 0..scores.len() {
        if labels[i] == Spoof {
            ns += 1;
            if scores[i] >= thr {
                fa += 1;
            }
        } else {
            nl += 1;
            if scores[i] < thr {
                fr += 1;
            }
        }
    }
    (100.0 * fa as f64 / ns as f64, 100.0 * fr as f64 / nl as f64)
}

#[test]
fn metric_examples() {
    let m = compute_metrics(&[0.9, 0.8, 0.2, 0.1], &[Live, Live, Spoof, Spoof], 0.5).unwrap();
    assert_eq!((m.apcer, m.bpcer, m.acer), (0.0, 0.0, 0.0));
    let m = compute_metrics(&[0.9, 0.4, 0.6, 0.2], &[Live, Live, Spoof, Spoof], 0.5).unwrap();
    assert_eq!((m.apcer, m.bpcer, m.acer, m.hter), (50.0, 50.0, 50.0, 50.0));
    // the threshold itself counts as accepted
    let m = compute_metrics(&[0.5, 0.5], &[Live, Spoof], 0.5).unwrap();
    assert_eq!((m.apcer, m.bpcer), (100.0, 0.0));
    assert!(matches!(compute_metrics(&[0.1], &[Live], 0.5), Err(Error::UndefinedMetric(_))));
    assert!(compute_metrics(&[0.1], &[Live, Spoof], 0.5).is_err());
}

#[test]
fn metrics_match_counting_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..1000 {
        let n = rng.random_range(2..40);
        let mut labels: Vec<Label> = (0..n).map(|_| if rng.random_bool(0.5) { Live } else { Spoof }).collect();
        labels[0] = Live;
        labels[1] = Spoof;
        // coarse grid so ties with the threshold happen
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..10) as f64 / 10.0).collect();
        let thr = rng.random_range(0..10) as f64 / 10.0;
        let m = compute_metrics(&scores, &labels, thr).unwrap();
        let (apcer, bpcer) = counting_oracle(&scores, &labels, thr);
        assert_eq!((m.apcer, m.bpcer), (apcer, bpcer));
        assert_eq!(m.acer, (m.apcer + m.bpcer) / 2.0);
        assert!((0.0..=100.0).contains(&m.acer));
    }
}

#[test]
fn threshold_examples() {
    assert_eq!(select_threshold(&[0.8, 0.2], &[Live, Spoof]).unwrap(), 0.5);
    let t = select_threshold(&[0.9, 0.7, 0.3, 0.1], &[Live, Live, Spoof, Spoof]).unwrap();
    assert_eq!(t, 0.5);
    assert!(select_threshold(&[0.9], &[Live]).is_err());
}

#[test]
fn threshold_balances_errors_on_overlapping_gaussians() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (live, spoof) = (Normal::new(1.0, 1.0).unwrap(), Normal::new(0.0, 1.0).unwrap());
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..200 {
        scores.push(live.sample(&mut rng));
        labels.push(Live);
        scores.push(spoof.sample(&mut rng));
        labels.push(Spoof);
    }
    let thr = select_threshold(&scores, &labels).unwrap();
    let m = compute_metrics(&scores, &labels, thr).unwrap();
    // one sample moves a rate by 0.5 points
    assert!((m.apcer - m.bpcer).abs() <= 0.5 + 1e-12, "{m:?}");
    // sweep oracle: no candidate does better
    let mut sorted = scores.clone();
    sorted.sort_by(f64::total_cmp);
    for w in sorted.windows(2) {
        let alt = compute_metrics(&scores, &labels, (w[0] + w[1]) / 2.0).unwrap();
        assert!((alt.apcer - alt.bpcer).abs() >= (m.apcer - m.bpcer).abs());
    }
}

proptest! {
    #[test]
    fn metrics_invariant_under_monotone_transform(
        raw in prop::collection::vec((0.0f64..1.0, any::<bool>()), 2..30),
        thr in 0.0f64..1.0,
    ) {
        let mut labels: Vec<Label> = raw.iter().map(|(_, l)| if *l { Live } else { Spoof }).collect();
        labels[0] = Live;
        labels[1] = Spoof;
        let scores: Vec<f64> = raw.iter().map(|(s, _)| *s).collect();
        let f = |x: f64| 3.0 * x.powi(3) + x + 2.0;
        let a = compute_metrics(&scores, &labels, thr).unwrap();
        let b = compute_metrics(&scores.iter().map(|&s| f(s)).collect::<Vec<_>>(), &labels, f(thr)).unwrap();
        prop_assert_eq!(a, b);
        prop_assert_eq!(a.acer, (a.apcer + a.bpcer) / 2.0);
    }
}

#[test]
fn fusion_rules() {
    assert!((Fusion::Average.combine(0.2, 0.4) - 0.3).abs() < 1e-15);
    assert_eq!(Fusion::Average.combine(0.0, 0.0), 0.0);
    assert_eq!(Fusion::Max.combine(0.2, 0.4), 0.4);
    assert_eq!("max".parse::<Fusion>().unwrap(), Fusion::Max);
    assert!("sum".parse::<Fusion>().is_err());
}

#[test]
fn scores_are_mean_abs_of_maps() {
    let m = ModelBundle::new(&crate::nets::NetConfig::tiny(32), 0, candle_core::DType::F64).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let img = |rng: &mut ChaCha8Rng| RgbImage::from_fn(32, 32, |_, _| [rng.random(), rng.random(), rng.random()]);
    let imgs = [img(&mut rng), img(&mut rng), img(&mut rng)];
    let t = crate::nets::convert::images_to_tensor(&imgs.iter().collect::<Vec<_>>(), candle_core::DType::F64).unwrap();
    let scores = infer_scores(&m, &t, Fusion::Average).unwrap();
    let maps = m.aux_maps(&t, Mode::EVAL).unwrap();
    let depth = crate::nets::convert::tensor_to_maps(&maps.depth_map).unwrap();
    let lbp = crate::nets::convert::tensor_to_maps(&maps.lbp_map).unwrap();
    for i in 0..3 {
        assert!((scores[i].depth - depth[i].mean_abs() as f64).abs() < 1e-6);
        assert!((scores[i].lbp - lbp[i].mean_abs() as f64).abs() < 1e-6);
        assert_eq!(scores[i].fused, (scores[i].lbp + scores[i].depth) / 2.0);
    }
    // zero output layers give zero scores
    for out in [&m.depth_net.out, &m.lbp_net.out] {
        out.weight.set(&out.weight.zeros_like().unwrap()).unwrap();
        if let Some(b) = &out.bias {
            b.set(&b.zeros_like().unwrap()).unwrap();
        }
    }
    assert!(infer_scores(&m, &t, Fusion::Max).unwrap().iter().all(|s| s.fused == 0.0));
}

#[test]
fn delta_map_basics() {
    let a = RgbImage::from_fn(4, 4, |y, x| [y as f32 / 4.0, x as f32 / 4.0, 0.5]);
    let d = delta_map(&a, &a).unwrap();
    assert!(d.is_all_zero());
    let b = RgbImage::from_fn(4, 4, |y, x| [y as f32 / 4.0, x as f32 / 4.0, 0.2]);
    let d = delta_map(&a, &b).unwrap();
    assert!(d.data.iter().all(|v| (v - 0.1).abs() < 1e-6));
    assert_eq!(render_delta(&d).get_pixel(0, 0).0, crate::raster::colormap(1.0));
    assert!(delta_map(&a, &RgbImage::new(2, 2)).is_err());
}

#[test]
fn pca_recovers_dominant_direction() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // points spread along (1, 1, 0) with small noise
    let rows: Vec<Vec<f32>> = (0..50)
        .map(|_| {
            let t: f32 = rng.random_range(-5.0..5.0);
            vec![t + rng.random_range(-0.01..0.01), t, rng.random_range(-0.01..0.01)]
        })
        .collect();
    let p = pca_2d(&rows).unwrap();
    let var = |k: usize| p.iter().map(|q| q[k] * q[k]).sum::<f64>() / p.len() as f64;
    assert!(var(0) > 1000.0 * var(1));
    // the first coordinate is ±√2·(t − mean t) up to noise
    let mean = rows.iter().map(|r| r[1] as f64).sum::<f64>() / rows.len() as f64;
    let sign = (p[0][0] * (rows[0][1] as f64 - mean)).signum();
    for (q, r) in p.iter().zip(&rows) {
        assert!((q[0] - sign * 2f64.sqrt() * (r[1] as f64 - mean)).abs() < 0.05);
    }
    assert!(pca_2d(&rows[..1]).is_err());
}

#[test]
fn features_csv_roundtrip_and_scatter() {
    let dir = tempfile::tempdir().unwrap();
    let rows: Vec<FeatureRow> = (0..6)
        .map(|i| FeatureRow {
            source_id: format!("train/x{i}.png"),
            label: if i % 2 == 0 { Live } else { Spoof },
            attack_type: if i % 2 == 0 { AttackType::None } else { AttackType::Screen },
            device: format!("d{}", i % 3),
            features: vec![i as f32, (i * i) as f32 * 0.5, -1.25],
        })
        .collect();
    let p = dir.path().join("f.csv");
    write_features(&p, &rows).unwrap();
    assert_eq!(read_features(&p).unwrap(), rows);
    let pts = pca_2d(&rows.iter().map(|r| r.features.clone()).collect::<Vec<_>>()).unwrap();
    let groups: Vec<String> = rows.iter().map(|r| r.device.clone()).collect();
    let png = dir.path().join("s.png");
    let colours = scatter_plot(&pts, &groups, &png, 200).unwrap();
    assert_eq!(colours.len(), 3);
    assert!(png.is_file());
    assert!(matches!(read_features(&dir.path().join("none.csv")), Err(Error::MissingArtifact(_))));
}
