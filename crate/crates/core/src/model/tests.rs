use super::*;
use crate::autodiff::{top_indices, Tape};
use proptest::prelude::*;

fn small_config() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            input_dim: 6,
            hidden_dims: vec![8],
            norm_kind: NormKind::LayerNorm,
            has_attention_bias: true,
            has_onexone: true,
        },
        num_classes: 3,
        prototypes_per_class: 2,
        sub_prototypes: 3,
        aggregation: Aggregation::default_topk(3),
        mapping: MappingScheme::Linear,
        norm_eps: 1e-5,
    }
}

fn batch(n: usize, dim: usize, seed: u64) -> Tensor {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * dim).map(|_| rng.random_range(-2.0..2.0)).collect();
    Tensor::new(vec![n, dim], data).unwrap()
}

/// Identity backbone: batch norm on running stats (mean 0, var 1, eps 0)
/// followed by ReLU passes non-negative inputs through unchanged.
fn identity_model(dim: usize, classes: usize, k: usize, aggregation: Aggregation) -> PrototypeModel {
    let config = ModelConfig {
        backbone: BackboneConfig {
            input_dim: dim,
            hidden_dims: vec![dim],
            norm_kind: NormKind::BatchNorm,
            has_attention_bias: false,
            has_onexone: false,
        },
        num_classes: classes,
        prototypes_per_class: 1,
        sub_prototypes: k,
        aggregation,
        mapping: MappingScheme::Linear,
        norm_eps: 0.0,
    };
    let mut m = PrototypeModel::init(config, 1).unwrap();
    m.layers[0].weight = Tensor::eye(dim);
    m
}

#[test]
fn default_config_sizes() {
    let m = PrototypeModel::init(ModelConfig::default(), 0).unwrap();
    assert_eq!(m.prototypes.shape(), &[50, 4, 64]);
    assert_eq!(m.head.shape(), &[5, 50]);
    assert_eq!(m.config.aggregation, Aggregation::TopkMean { k: 2 });
    let x = batch(7, 32, 3);
    let out = m.predict(&x, NormStats::Batch).unwrap();
    assert_eq!(out.raw_sims.shape(), &[7, 50, 4]);
    assert_eq!(out.mapped_sims.shape(), &[7, 50]);
    for row in out.probs.rows() {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    for (i, row) in out.probs.rows().enumerate() {
        assert_eq!(out.pseudo_labels[i], crate::autodiff::argmax(row));
        assert_eq!(out.confidences[i], row[out.pseudo_labels[i]]);
    }
    assert!(out.mapped_sims.data().iter().all(|&s| (MAPPING_EPS..=1.0 - MAPPING_EPS).contains(&s)));
}

#[test]
fn prototype_equal_to_feature_gives_unit_similarity() {
    let mut m = identity_model(3, 2, 1, Aggregation::Max);
    let x = Tensor::from_rows(&[vec![0.3, 1.2, 0.5]]).unwrap();
    m.prototypes.data_mut()[..3].copy_from_slice(&[0.3, 1.2, 0.5]);
    let out = m.predict(&x, NormStats::Running).unwrap();
    assert!((out.raw_sims.data()[0] - 1.0).abs() < 1e-12);
    assert_eq!(out.mapped_sims.data()[0], 1.0 - MAPPING_EPS);
    // Max over a single sub-prototype is the raw similarity itself.
    assert_eq!(out.agg_sims.data(), out.raw_sims.data());
}

#[test]
fn orthogonal_three_class_toy() {
    let mut m = identity_model(3, 3, 1, Aggregation::Max);
    m.prototypes = Tensor::new(vec![3, 1, 3], Tensor::eye(3).into_data()).unwrap();
    let x = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.1, 0.0, 2.0]]).unwrap();
    let out = m.predict(&x, NormStats::Running).unwrap();
    assert_eq!(out.pseudo_labels, vec![0, 2]);
    assert_eq!(out.agg_sims.row(0), &[1.0, 0.0, 0.0]);
}

#[test]
fn zero_feature_names_sample() {
    let m = identity_model(3, 2, 1, Aggregation::Max);
    let x = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![-1.0, -2.0, -0.5]]).unwrap();
    match m.predict(&x, NormStats::Running) {
        Err(Error::Degenerate(msg)) => assert!(msg.contains("sample 1"), "{msg}"),
        other => panic!("expected degenerate error, got {other:?}"),
    }
}

#[test]
fn mapping_examples() {
    let raw = Tensor::from_vec(vec![-1.0, 0.0, 1.0]).unwrap();
    let lin = map_similarity(&raw, MappingScheme::Linear).unwrap();
    assert_eq!(lin.data(), &[MAPPING_EPS, 0.5, 1.0 - MAPPING_EPS]);
    let sig = map_similarity(&raw, MappingScheme::temp_sigmoid()).unwrap();
    assert_eq!(sig.data()[1], 0.5);
    let d = Tensor::from_vec(vec![0.0, 1.0, 4.0]).unwrap();
    let s = log_inverse_scores(&d).unwrap();
    assert!((s.data()[0] - (1.0f64 / 1e-4).ln()).abs() < 1e-9);
    assert!((s.data()[0] - 9.2103).abs() < 1e-4);
    let mapped = map_similarity(&d, MappingScheme::LogInverseDistance).unwrap();
    assert_eq!(mapped.data()[0], 1.0 - MAPPING_EPS);
    assert_eq!(mapped.data()[2], MAPPING_EPS);
    let flat = map_similarity(&Tensor::full(&[3], 0.7), MappingScheme::LogInverseDistance).unwrap();
    assert!(flat.data().iter().all(|&v| v == 0.5));
}

#[test]
fn mapping_domain_errors() {
    let raw = Tensor::from_vec(vec![0.0, 1.01]).unwrap();
    assert!(matches!(map_similarity(&raw, MappingScheme::Linear), Err(Error::Domain(_))));
    let d = Tensor::from_vec(vec![0.2, -0.5]).unwrap();
    assert!(matches!(map_similarity(&d, MappingScheme::LogInverseDistance), Err(Error::Domain(_))));
}

#[test]
fn contributions_definition_and_top5() {
    let agg = Tensor::from_rows(&[vec![0.8, 0.2, -0.1]]).unwrap();
    let head = Tensor::from_rows(&[vec![0.5, -1.0, 2.0], vec![1.0, 1.0, 1.0]]).unwrap();
    let c = prototype_contributions(&agg, &head, 0).unwrap();
    assert!((c.data()[0] - 0.4).abs() < 1e-15);
    assert_eq!(c.data()[1], 0.2);
    let zero = prototype_contributions(&agg, &Tensor::zeros(&[2, 3]), 1).unwrap();
    assert!(zero.data().iter().all(|&v| v == 0.0));
    assert!(matches!(prototype_contributions(&agg, &head, 2), Err(Error::Parameter(_))));

    let m = PrototypeModel::init(ModelConfig::default(), 4).unwrap();
    let out = m.predict(&batch(3, 32, 9), NormStats::Batch).unwrap();
    let c = prototype_contributions(&out.agg_sims, &m.head, 2).unwrap();
    for (i, row) in c.rows().enumerate() {
        let top = top_indices(row, 5);
        // Exhaustive: every excluded prototype is no larger than every kept one.
        let min_kept = top.iter().map(|&j| row[j]).fold(f64::INFINITY, f64::min);
        for p in 0..row.len() {
            let expected = out.agg_sims.row(i)[p] * m.head.row(2)[p].abs();
            assert_eq!(row[p], expected);
            if !top.contains(&p) {
                assert!(row[p] <= min_kept);
            }
        }
    }
}

#[test]
fn param_sets_nest_and_exclude_bank() {
    let m = PrototypeModel::init(ModelConfig::default(), 0).unwrap();
    let counts: Vec<usize> = [ParamMode::NormOnly, ParamMode::NormPlusAddons, ParamMode::AllAdaptive]
        .iter()
        .map(|&mode| {
            let set = AdaptableParamSet::resolve(&m, mode);
            assert!(!set.contains("prototypes") && !set.contains("head"));
            assert!(!set.names.iter().any(|n| n.contains("running")));
            set.parameter_count(&m)
        })
        .collect();
    assert!(counts[0] < counts[1] && counts[1] < counts[2], "{counts:?}");
    let norm = AdaptableParamSet::resolve(&m, ParamMode::NormOnly);
    assert_eq!(norm.names, vec!["layers.0.norm.gamma", "layers.0.norm.beta"]);
}

#[test]
fn invalid_bank_rejected() {
    let mut m = PrototypeModel::init(small_config(), 0).unwrap();
    m.prototypes.data_mut()[..8].fill(0.0);
    assert!(matches!(m.validate(), Err(Error::Degenerate(_))));
    let mut m = PrototypeModel::init(small_config(), 0).unwrap();
    m.class_of = vec![0, 0, 1, 1, 1, 1];
    assert!(matches!(m.validate(), Err(Error::Contract(_))));
    let mut cfg = small_config();
    cfg.aggregation = Aggregation::TopkMean { k: 4 };
    assert!(matches!(PrototypeModel::init(cfg, 0), Err(Error::Config(_))));
}

#[test]
fn save_load_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ptta");
    let mut cfg = small_config();
    cfg.backbone.norm_kind = NormKind::BatchNorm;
    let mut m = PrototypeModel::init(cfg, 11).unwrap();
    m.layers[0].running_var.data_mut()[2] = 0.3;
    save_model(&m, &path).unwrap();
    let first = std::fs::read(&path).unwrap();
    let loaded = load_model(&path).unwrap();
    assert_eq!(loaded, m);
    save_model(&loaded, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), first);

    let x = batch(5, 6, 2);
    for stats in [NormStats::Batch, NormStats::Running] {
        let a = m.predict(&x, stats).unwrap();
        let b = loaded.predict(&x, stats).unwrap();
        assert!(a.logits.bit_eq(&b.logits) && a.mapped_sims.bit_eq(&b.mapped_sims));
    }

    std::fs::write(&path, &first[..first.len() - 5]).unwrap();
    assert!(matches!(load_model(&path), Err(Error::Corrupt(_))));
    let mut wrong = first.clone();
    wrong[4] = b'2';
    assert!(matches!(PrototypeModel::from_bytes(&wrong), Err(Error::VersionMismatch { .. })));
}

#[test]
fn trainable_params_receive_gradients() {
    let m = PrototypeModel::init(small_config(), 5).unwrap();
    let set = AdaptableParamSet::resolve(&m, ParamMode::AllAdaptive);
    let opts = ForwardOptions { stats: NormStats::Batch, consensus: None, trainable: set.names.clone() };
    let mut tape = Tape::new();
    let out = m.forward(&mut tape, &batch(4, 6, 1), &opts).unwrap();
    let loss = tape.mean(out.vars.mapped_sims).unwrap();
    let grads = tape.backward(loss).unwrap();
    for name in &set.names {
        let g = grads.get(out.vars.param(name).unwrap());
        assert!(g.data().iter().any(|&v| v != 0.0), "{name} got no gradient");
    }
    let g = grads.get(out.vars.param("prototypes").unwrap());
    assert!(g.data().iter().all(|&v| v == 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn aggregation_consistency(seed in 0u64..1000) {
        let x = batch(4, 6, seed);
        let with = |agg| {
            let mut cfg = small_config();
            cfg.aggregation = agg;
            PrototypeModel::init(cfg, seed).unwrap().predict(&x, NormStats::Batch).unwrap().agg_sims
        };
        let (top1, top3) = (Aggregation::TopkMean { k: 1 }, Aggregation::TopkMean { k: 3 });
        prop_assert!(with(top1).bit_eq(&with(Aggregation::Max)));
        prop_assert!(with(top3).bit_eq(&with(Aggregation::Mean)));
    }

    #[test]
    fn logit_linearity(seed in 0u64..1000, lambda in 0.05f64..20.0) {
        let mut m = PrototypeModel::init(small_config(), seed).unwrap();
        let x = batch(5, 6, seed + 1);
        let base = m.predict(&x, NormStats::Batch).unwrap();
        for w in m.head.data_mut() {
            *w *= lambda;
        }
        let scaled = m.predict(&x, NormStats::Batch).unwrap();
        for (a, b) in base.logits.data().iter().zip(scaled.logits.data()) {
            prop_assert!((a * lambda - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
        prop_assert_eq!(base.pseudo_labels, scaled.pseudo_labels);
    }

    #[test]
    fn mappings_monotone(mut xs in prop::collection::vec(-1.0f64..1.0, 2..20), tau in 0.5f64..10.0) {
        xs.sort_by(f64::total_cmp);
        let raw = Tensor::from_vec(xs.clone()).unwrap();
        for scheme in [MappingScheme::Linear, MappingScheme::TempSigmoid { tau_temp: tau }] {
            let y = map_similarity(&raw, scheme).unwrap();
            prop_assert!(y.data().windows(2).all(|w| w[0] <= w[1]));
        }
        // Distances from similarities: larger similarity, smaller distance, larger score.
        let d = Tensor::from_vec(xs.iter().map(|s| 2.0 - 2.0 * s).collect()).unwrap();
        let y = map_similarity(&d, MappingScheme::LogInverseDistance).unwrap();
        prop_assert!(y.data().windows(2).all(|w| w[0] <= w[1]));
    }
}
