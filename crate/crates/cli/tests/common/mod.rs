#![allow(dead_code)]

use prototta::harness::{generate_dataset, save_dataset, train_source_model, Dataset, SyntheticTaskSpec, TrainOptions};
use prototta::model::{save_model, ModelConfig, PrototypeModel};
use prototta::tta::{Method, TtaConfig};
use prototta_cli::{BenchmarkPlan, MetricKind, NamedMethod};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

pub struct Fixture {
    _dir: tempfile::TempDir,
    pub model_path: PathBuf,
    pub data_path: PathBuf,
    pub model: PrototypeModel,
    pub dataset: Dataset,
}

/// A small trained model and dataset shared by every test in the binary.
pub fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticTaskSpec { train_samples: 600, test_samples: 200, seed: 3, ..Default::default() };
        let dataset = generate_dataset(&spec).unwrap();
        let opts = TrainOptions { epochs: 8, seed: 3, ..Default::default() };
        let (model, _) = train_source_model(&dataset.train, ModelConfig::default(), &opts).unwrap();
        let model_path = dir.path().join("model.ptta");
        let data_path = dir.path().join("data.pttd");
        save_model(&model, &model_path).unwrap();
        save_dataset(&dataset, &data_path).unwrap();
        Fixture { _dir: dir, model_path, data_path, model, dataset }
    })
}

pub fn method(name: &str, method: Method) -> NamedMethod {
    NamedMethod { name: name.into(), config: TtaConfig { batch_size: 64, ..TtaConfig::for_method(method) } }
}

pub fn all_methods() -> Vec<NamedMethod> {
    vec![
        method("unadapted", Method::Unadapted),
        method("tent", Method::Tent),
        method("prototta", Method::Prototta),
        method("prototta_plus", Method::ProtottaPlus),
    ]
}

pub fn plan(out: &Path, methods: Vec<NamedMethod>, corruptions: &[&str], seeds: Vec<u64>) -> BenchmarkPlan {
    let f = fixture();
    BenchmarkPlan {
        model: f.model_path.clone(),
        dataset: f.data_path.clone(),
        corruptions: corruptions.iter().map(|c| c.parse().unwrap()).collect(),
        methods,
        metrics: MetricKind::ALL.to_vec(),
        output_dir: out.to_path_buf(),
        seeds,
        pca_k: 5,
    }
}

/// Rows of a CSV file as string vectors, header first.
pub fn read_csv(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path).unwrap();
    r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect()
}
