use prototta::metrics::ActivationRecord;
use prototta::model::{prototype_contributions, ModelConfig, PrototypeModel};
use prototta::autodiff::Tensor;
use prototta::Error;
use prototta_cli::correlate::{correlations, join_scores};
use prototta_cli::{correlate_scores, export_boards, read_boards, ReasoningBoard};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

fn model() -> PrototypeModel {
    PrototypeModel::init(ModelConfig::default(), 11).unwrap()
}

fn records(model: &PrototypeModel, n: usize, method: &str, seed: u64) -> Vec<ActivationRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = model.num_prototypes();
    (0..n)
        .map(|i| {
            let adapted: Vec<f64> = (0..p).map(|_| rng.random_range(0.01..1.0)).collect();
            ActivationRecord {
                sample_id: format!("gaussian_noise:5/s0/{i}"),
                method: method.into(),
                clean_activations: (0..p).map(|_| rng.random_range(0.01..1.0)).collect(),
                adapted_mapped: adapted.iter().map(|a| a / 2.0).collect(),
                adapted_activations: adapted,
                clean_prediction: i % model.num_classes(),
                adapted_prediction: (i + 1) % model.num_classes(),
                ground_truth: i % model.num_classes(),
            }
        })
        .collect()
}

/// Ground-truth share of the board's contribution mass, computed by hand.
fn share(board: &ReasoningBoard) -> f64 {
    let total: f64 = board.prototypes.iter().map(|e| e.contribution).sum();
    let own: f64 = board.prototypes.iter().filter(|e| e.class == board.ground_truth).map(|e| e.contribution).sum();
    own / total
}

fn pearson_oracle(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

fn write_scores(path: &Path, rows: &[(String, f64)]) {
    let mut w = csv::Writer::from_path(path).unwrap();
    w.write_record(["sample_id", "score"]).unwrap();
    for (id, s) in rows {
        w.write_record([id.clone(), s.to_string()]).unwrap();
    }
    w.flush().unwrap();
}

#[test]
fn boards_hold_the_top_contributions() {
    let m = model();
    for r in records(&m, 20, "prototta", 1) {
        let one = ReasoningBoard::build(&r, &m, 1).unwrap();
        assert_eq!(one.prototypes.len(), 1);

        let board = ReasoningBoard::build(&r, &m, 5).unwrap();
        assert_eq!(board.board_id, format!("prototta:{}", r.sample_id));
        let agg = Tensor::new(vec![1, m.num_prototypes()], r.adapted_activations.clone()).unwrap();
        let expected = prototype_contributions(&agg, &m.head, r.ground_truth).unwrap();
        let mut sorted: Vec<f64> = expected.data().to_vec();
        sorted.sort_by(|a, b| b.total_cmp(a));
        for (e, want) in board.prototypes.iter().zip(&sorted) {
            assert!((e.contribution - want).abs() < 1e-12);
            assert!((e.contribution - expected.data()[e.prototype]).abs() < 1e-12);
            assert_eq!(e.class, m.class_of[e.prototype]);
            assert_eq!(e.raw_similarity, r.adapted_activations[e.prototype]);
        }
        assert!(board.prototypes.windows(2).all(|w| w[0].contribution > w[1].contribution));
        assert_eq!(one.prototypes[0], board.prototypes[0]);
        assert!((board.pca_w().unwrap().unwrap() - share(&board)).abs() < 1e-12);
    }
}

#[test]
fn malformed_records_are_rejected() {
    let m = model();
    let mut r = records(&m, 1, "tent", 2).remove(0);
    assert!(matches!(ReasoningBoard::build(&r, &m, 0), Err(Error::Parameter(_))));
    assert!(matches!(ReasoningBoard::build(&r, &m, m.num_prototypes() + 1), Err(Error::Parameter(_))));
    r.adapted_activations.pop();
    assert!(matches!(ReasoningBoard::build(&r, &m, 3), Err(Error::Export(_))));
    let mut r = records(&m, 1, "tent", 2).remove(0);
    r.ground_truth = m.num_classes();
    assert!(matches!(ReasoningBoard::build(&r, &m, 3), Err(Error::Export(_))));

    let dir = tempfile::tempdir().unwrap();
    let twice = [records(&m, 1, "tent", 2), records(&m, 1, "tent", 3)].concat();
    assert!(matches!(export_boards(&twice, &m, 3, dir.path()), Err(Error::Export(_))));
}

#[test]
fn export_then_read_roundtrips() {
    let m = model();
    let dir = tempfile::tempdir().unwrap();
    let recs = [records(&m, 6, "tent", 4), records(&m, 6, "prototta", 5)].concat();
    let paths = export_boards(&recs, &m, 3, dir.path()).unwrap();
    assert_eq!(paths.len(), 12);
    let mut built: Vec<ReasoningBoard> = recs.iter().map(|r| ReasoningBoard::build(r, &m, 3).unwrap()).collect();
    built.sort_by(|a, b| a.board_id.cmp(&b.board_id));
    assert_eq!(read_boards(dir.path()).unwrap(), built);
}

#[test]
fn correlation_matches_oracles() {
    let m = model();
    let dir = tempfile::tempdir().unwrap();
    let boards_dir = dir.path().join("boards");
    let recs = records(&m, 12, "prototta", 6);
    export_boards(&recs, &m, 4, &boards_dir).unwrap();
    let boards = read_boards(&boards_dir).unwrap();
    let x: Vec<f64> = boards.iter().map(share).collect();

    // Scores identical to PCA-W, keyed by bare sample id.
    let same: Vec<(String, f64)> = boards.iter().zip(&x).map(|(b, v)| (b.sample_id.clone(), *v)).collect();
    write_scores(&dir.path().join("same.csv"), &same);
    let rows = correlate_scores(&boards_dir, &dir.path().join("same.csv"), &dir.path().join("out/c.csv")).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].n, 12);
    assert!((rows[0].pearson - 1.0).abs() < 1e-12);
    assert!((rows[0].spearman - 1.0).abs() < 1e-12);
    assert!(dir.path().join("out/c.csv").is_file());

    // Arbitrary scores keyed by board id.
    let y: Vec<f64> = (0..12).map(|i| ((i * 7) % 5) as f64 + 0.25 * i as f64).collect();
    let scored: Vec<(String, f64)> = boards.iter().zip(&y).map(|(b, v)| (b.board_id.clone(), *v)).collect();
    let pairs = join_scores(&boards, &scored).unwrap();
    let r = correlations(&pairs).unwrap();
    assert!((r[0].pearson - pearson_oracle(&x, &y)).abs() < 1e-9);

    let constant: Vec<(String, f64)> = boards.iter().map(|b| (b.board_id.clone(), 3.0)).collect();
    assert!(matches!(correlations(&join_scores(&boards, &constant).unwrap()), Err(Error::UndefinedCorrelation(_))));

    let few: Vec<(String, f64)> = scored.iter().take(2).cloned().chain([("nobody".to_string(), 1.0)]).collect();
    assert!(matches!(correlations(&join_scores(&boards, &few).unwrap()), Err(Error::InsufficientData(_))));
}

#[test]
fn shared_sample_ids_need_board_ids() {
    let m = model();
    let boards: Vec<ReasoningBoard> = [records(&m, 5, "tent", 7), records(&m, 5, "prototta", 8)]
        .concat()
        .iter()
        .map(|r| ReasoningBoard::build(r, &m, 8).unwrap())
        .collect();
    let by_sample: Vec<(String, f64)> = boards.iter().map(|b| (b.sample_id.clone(), 1.0)).collect();
    assert!(join_scores(&boards, &by_sample).unwrap().is_empty());

    let by_board: Vec<(String, f64)> = boards.iter().enumerate().map(|(i, b)| (b.board_id.clone(), (i * i) as f64)).collect();
    let rows = correlations(&join_scores(&boards, &by_board).unwrap()).unwrap();
    let scopes: Vec<&str> = rows.iter().map(|r| r.scope.as_str()).collect();
    assert_eq!(scopes, ["pooled", "prototta", "tent"]);
    assert_eq!(rows[0].n, 10);
    assert!(rows.iter().all(|r| (-1.0..=1.0).contains(&r.pearson)));
}
