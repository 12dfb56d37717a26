use super::*;
use crate::error::Error;
use crate::model::{ModelConfig, NormKind, PrototypeModel};
use proptest::prelude::*;
use std::time::Instant;

fn small_spec(seed: u64) -> SyntheticTaskSpec {
    SyntheticTaskSpec { train_samples: 300, test_samples: 100, seed, ..Default::default() }
}

fn nearest_centroid_accuracy(ds: &Dataset, x: &Tensor, labels: &[usize]) -> f64 {
    let per = ds.spec.clusters_per_class;
    let correct = x
        .rows()
        .zip(labels)
        .filter(|(row, &y)| {
            let mut best = (f64::INFINITY, usize::MAX);
            for (c, center) in ds.centers.rows().enumerate() {
                let d: f64 = row.iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best.0 {
                    best = (d, c / per);
                }
            }
            best.1 == y
        })
        .count();
    100.0 * correct as f64 / labels.len() as f64
}

fn sq_dist(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[test]
fn generation_is_deterministic() {
    let a = generate_dataset(&small_spec(3)).unwrap();
    let b = generate_dataset(&small_spec(3)).unwrap();
    assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
    let c = generate_dataset(&small_spec(4)).unwrap();
    assert_ne!(a.train.x, c.train.x);
}

#[test]
fn classes_are_balanced_and_centers_unit_norm() {
    let ds = generate_dataset(&SyntheticTaskSpec { train_samples: 503, ..small_spec(1) }).unwrap();
    let mut counts = vec![0usize; ds.spec.num_classes];
    for &y in &ds.train.labels {
        counts[y] += 1;
    }
    let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
    assert!(hi - lo <= 1, "{counts:?}");
    for row in ds.centers.rows() {
        assert!((crate::autodiff::l2_norm(row) - 1.0).abs() < 1e-12);
    }
    assert_eq!(ds.centers.shape(), &[10, 32]);
}

#[test]
fn clean_clusters_are_separable() {
    let ds = generate_dataset(&small_spec(0)).unwrap();
    assert!(nearest_centroid_accuracy(&ds, &ds.test.x, &ds.test.labels) > 95.0);
}

#[test]
fn invalid_specs_are_config_errors() {
    for spec in [
        SyntheticTaskSpec { num_classes: 1, ..Default::default() },
        SyntheticTaskSpec { cluster_spread: 0.0, ..Default::default() },
        SyntheticTaskSpec { test_samples: 0, ..Default::default() },
        SyntheticTaskSpec { input_dim: 0, ..Default::default() },
    ] {
        assert!(matches!(generate_dataset(&spec), Err(Error::Config(_))));
    }
}

#[test]
fn severity_tables_strengthen_monotonically() {
    for kind in CorruptionKind::ALL {
        let levels: Vec<f64> = (1..=5).map(|s| CorruptionSpec::new(kind, s).unwrap().intensity()).collect();
        assert!(levels.windows(2).all(|w| w[0] <= w[1]), "{kind:?} {levels:?}");
    }
    let s5 = |kind| CorruptionSpec::new(kind, 5).unwrap().parameter();
    assert_eq!(s5(CorruptionKind::GaussianNoise), 0.5);
    assert_eq!(s5(CorruptionKind::ImpulseNoise), 0.3);
    assert_eq!(s5(CorruptionKind::BrightnessShift), 0.8);
    assert_eq!(s5(CorruptionKind::ContrastScale), 0.2);
    assert_eq!(s5(CorruptionKind::BlockPixelate), 8.0);
    assert!(CorruptionSpec::new(CorruptionKind::GaussianNoise, 0).is_err());
    assert!(CorruptionSpec::new(CorruptionKind::GaussianNoise, 6).is_err());
}

#[test]
fn contrast_factor_one_is_identity() {
    let ds = generate_dataset(&small_spec(2)).unwrap();
    assert!(scale_contrast(&ds.test.x, 1.0).bit_eq(&ds.test.x));
    let flat = scale_contrast(&ds.test.x, 0.0);
    for row in flat.rows() {
        assert!(row.iter().all(|v| (v - row[0]).abs() < 1e-12));
    }
}

#[test]
fn gaussian_noise_variance_matches_table() {
    let x = Tensor::zeros(&[100, 100]);
    for severity in 1..=5 {
        let spec = CorruptionSpec::new(CorruptionKind::GaussianNoise, severity).unwrap();
        let noisy = corrupt(&x, spec, 11);
        let n = noisy.numel() as f64;
        let mean = noisy.data().iter().sum::<f64>() / n;
        let var = noisy.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        let target = spec.parameter().powi(2);
        assert!((var / target - 1.0).abs() < 0.1, "severity {severity}: {var} vs {target}");
    }
}

#[test]
fn every_corruption_changes_each_sample() {
    let ds = generate_dataset(&small_spec(5)).unwrap();
    for kind in CorruptionKind::ALL {
        for severity in 1..=5 {
            let spec = CorruptionSpec::new(kind, severity).unwrap();
            let out = corrupt(&ds.test.x, spec, 9);
            assert_eq!(out.shape(), ds.test.x.shape());
            for (a, b) in out.rows().zip(ds.test.x.rows()) {
                assert!(a.iter().zip(b).any(|(u, v)| u != v), "{spec} left a row unchanged");
            }
            assert!(out.bit_eq(&corrupt(&ds.test.x, spec, 9)), "{spec} is not deterministic");
        }
    }
}

#[test]
fn perturbation_grows_with_severity() {
    let ds = generate_dataset(&SyntheticTaskSpec { test_samples: 1000, ..small_spec(6) }).unwrap();
    for kind in CorruptionKind::ALL {
        let sizes: Vec<f64> = (1..=5)
            .map(|s| sq_dist(&corrupt(&ds.test.x, CorruptionSpec::new(kind, s).unwrap(), 21), &ds.test.x))
            .collect();
        assert!(sizes.windows(2).all(|w| w[0] <= w[1] * (1.0 + 1e-9)), "{kind:?} {sizes:?}");
    }
}

#[test]
fn impulse_replaces_the_expected_count() {
    let x = Tensor::from_rows(&[(0..20).map(|i| i as f64 * 0.1 - 1.0).collect()]).unwrap();
    let spec = CorruptionSpec::new(CorruptionKind::ImpulseNoise, 4).unwrap();
    let out = corrupt(&x, spec, 3);
    let changed: Vec<f64> = out.data().iter().zip(x.data()).filter(|(a, b)| a != b).map(|(a, _)| *a).collect();
    assert_eq!(changed.len(), 4);
    assert!(changed.iter().all(|v| v.abs() == 1.0));
}

#[test]
fn pixelate_averages_blocks() {
    let x = Tensor::from_rows(&[vec![1.0, 3.0, 5.0, 7.0, 2.0]]).unwrap();
    let out = corrupt(&x, CorruptionSpec::new(CorruptionKind::BlockPixelate, 1).unwrap(), 0);
    assert_eq!(out.data(), &[2.0, 2.0, 6.0, 6.0, 2.0]);
}

#[test]
fn corruption_specs_parse_and_print() {
    let spec: CorruptionSpec = "gaussian_noise:5".parse().unwrap();
    assert_eq!(spec, CorruptionSpec::new(CorruptionKind::GaussianNoise, 5).unwrap());
    assert_eq!(spec.to_string(), "gaussian_noise:5");
    assert_eq!(serde_json::to_string(&spec).unwrap(), "\"gaussian_noise:5\"");
    let back: CorruptionSpec = serde_json::from_str("\"block_pixelate:2\"").unwrap();
    assert_eq!(back.kind, CorruptionKind::BlockPixelate);
    for bad in ["gaussian_noise", "gaussian_noise:9", "fog:3", "contrast_scale:x"] {
        assert!(matches!(bad.parse::<CorruptionSpec>(), Err(Error::Config(_))), "{bad}");
    }
    assert_eq!(CorruptionKind::BlockPixelate.group(), "blur");
}

#[test]
fn default_task_trains_to_target_quickly() {
    let start = Instant::now();
    let ds = generate_dataset(&SyntheticTaskSpec::default()).unwrap();
    let before = ds.clone();
    let (model, report) = train_source_model(&ds.train, ModelConfig::default(), &TrainOptions::default()).unwrap();
    let test_acc = evaluate(&model, &ds.test).unwrap();
    assert!(test_acc >= 90.0, "clean test accuracy {test_acc}");
    assert!(start.elapsed().as_secs_f64() < 60.0);
    assert_eq!(report.epoch_losses.len(), 30);
    assert!(report.epoch_losses.last().unwrap() < &report.epoch_losses[0]);
    assert_eq!(ds, before);
}

#[test]
fn zero_epochs_returns_the_initialization() {
    let ds = generate_dataset(&small_spec(7)).unwrap();
    let cfg = ModelConfig::default();
    let opts = TrainOptions { epochs: 0, seed: 4, ..Default::default() };
    let (model, report) = train_source_model(&ds.train, cfg.clone(), &opts).unwrap();
    let init = PrototypeModel::init(cfg, 4).unwrap();
    assert_eq!(model.to_bytes().unwrap(), init.to_bytes().unwrap());
    assert!(report.epoch_losses.is_empty());
}

#[test]
fn training_is_deterministic() {
    let ds = generate_dataset(&small_spec(8)).unwrap();
    let mut cfg = ModelConfig::default();
    cfg.backbone.norm_kind = NormKind::BatchNorm;
    let opts = TrainOptions { epochs: 3, seed: 2, ..Default::default() };
    let (a, ra) = train_source_model(&ds.train, cfg.clone(), &opts).unwrap();
    let (b, rb) = train_source_model(&ds.train, cfg, &opts).unwrap();
    assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
    assert_eq!(ra, rb);
}

#[test]
fn calibration_matches_population_statistics() {
    let ds = generate_dataset(&small_spec(9)).unwrap();
    let mut cfg = ModelConfig::default();
    cfg.backbone.norm_kind = NormKind::BatchNorm;
    let mut model = PrototypeModel::init(cfg, 1).unwrap();
    calibrate_running_stats(&mut model, &ds.train).unwrap();
    // First layer pre-norm activations are x W + b with W stored [in, out].
    let layer = &model.layers[0];
    let out_dim = layer.weight.shape()[1];
    let n = ds.train.len() as f64;
    for u in [0, 17, out_dim - 1] {
        let acts: Vec<f64> = ds
            .train
            .x
            .rows()
            .map(|r| r.iter().enumerate().map(|(i, a)| a * layer.weight.get(&[i, u])).sum::<f64>() + layer.bias.data()[u])
            .collect();
        let mean = acts.iter().sum::<f64>() / n;
        let var = acts.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
        assert!((layer.running_mean.data()[u] - mean).abs() < 1e-9);
        assert!((layer.running_var.data()[u] - var).abs() < 1e-9);
    }
}

#[test]
fn bad_training_options_are_config_errors() {
    let ds = generate_dataset(&small_spec(0)).unwrap();
    for opts in [TrainOptions { batch_size: 1, ..Default::default() }, TrainOptions { lr: 0.0, ..Default::default() }] {
        assert!(matches!(train_source_model(&ds.train, ModelConfig::default(), &opts), Err(Error::Config(_))));
    }
}

#[test]
fn dataset_files_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("task.pttd");
    let ds = generate_dataset(&small_spec(10)).unwrap();
    save_dataset(&ds, &path).unwrap();
    let back = load_dataset(&path).unwrap();
    assert_eq!(back, ds);

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[..5].copy_from_slice(b"PTTA1");
    assert!(matches!(Dataset::from_bytes(&bytes), Err(Error::Format(_))));
    let bytes = std::fs::read(&path).unwrap();
    assert!(matches!(Dataset::from_bytes(&bytes[..bytes.len() - 9]), Err(Error::Corrupt(_))));
}

#[test]
fn batches_cover_the_split_in_order() {
    let ds = generate_dataset(&small_spec(11)).unwrap();
    let batches = make_batches(&ds.test.x, &ds.test.labels, 32, "t");
    assert_eq!(batches.iter().map(|b| b.len()).collect::<Vec<_>>(), vec![32, 32, 32, 4]);
    assert_eq!(batches[1].ids[0], "t32");
    assert_eq!(batches[3].x.row(3), ds.test.x.row(99));
    assert_eq!(batches[3].labels[3], ds.test.labels[99]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn corruption_preserves_shape_and_finiteness(seed in 0u64..1000, kind in 0usize..5, severity in 1u8..=5) {
        let x = generate_dataset(&SyntheticTaskSpec { train_samples: 4, test_samples: 7, seed, ..Default::default() }).unwrap().test.x;
        let spec = CorruptionSpec::new(CorruptionKind::ALL[kind], severity).unwrap();
        let out = corrupt(&x, spec, seed);
        prop_assert_eq!(out.shape(), x.shape());
        prop_assert!(out.is_finite());
    }

    #[test]
    fn contrast_keeps_row_means(seed in 0u64..1000, factor in 0.0f64..2.0) {
        let x = generate_dataset(&SyntheticTaskSpec { train_samples: 4, test_samples: 5, seed, ..Default::default() }).unwrap().test.x;
        let out = scale_contrast(&x, factor);
        for (a, b) in out.rows().zip(x.rows()) {
            let (ma, mb) = (a.iter().sum::<f64>(), b.iter().sum::<f64>());
            prop_assert!((ma - mb).abs() < 1e-9);
        }
    }
}
