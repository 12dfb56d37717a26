use crate::autodiff::Tensor;
use crate::container;
use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::path::Path;

pub const DATASET_MAGIC: &[u8; 5] = b"PTTD1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub num_classes: usize,
    pub input_dim: usize,
    pub clusters_per_class: usize,
    pub cluster_spread: f64,
    pub train_samples: usize,
    pub test_samples: usize,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            num_classes: 5,
            input_dim: 32,
            clusters_per_class: 2,
            cluster_spread: 0.1,
            train_samples: 2000,
            test_samples: 1280,
            seed: 0,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("a task needs at least two classes".into()));
        }
        if self.input_dim == 0 || self.clusters_per_class == 0 {
            return Err(Error::Config("input_dim and clusters_per_class must be positive".into()));
        }
        if !(self.cluster_spread > 0.0 && self.cluster_spread.is_finite()) {
            return Err(Error::Config(format!("cluster_spread must be positive, got {}", self.cluster_spread)));
        }
        if self.train_samples == 0 || self.test_samples == 0 {
            return Err(Error::Config("both splits need at least one sample".into()));
        }
        Ok(())
    }
}

/// Inputs `[n, input_dim]` with their class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub x: Tensor,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows `indices` as a new split.
    pub fn subset(&self, indices: &[usize]) -> Split {
        let d = self.x.last_dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.x.row(i));
        }
        let x = Tensor::new(vec![indices.len(), d], data).expect("rows come from a valid tensor");
        Split { x, labels: indices.iter().map(|&i| self.labels[i]).collect() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: SyntheticTaskSpec,
    pub train: Split,
    pub test: Split,
    /// `[C * clusters_per_class, input_dim]` unit-norm cluster centers,
    /// grouped by class.
    pub centers: Tensor,
}

fn sample_split(rng: &mut ChaCha8Rng, spec: &SyntheticTaskSpec, centers: &Tensor, n: usize) -> Split {
    let noise = Normal::new(0.0, spec.cluster_spread).expect("validated spread");
    let mut labels: Vec<usize> = (0..n).map(|i| i % spec.num_classes).collect();
    labels.shuffle(rng);
    let mut data = Vec::with_capacity(n * spec.input_dim);
    for &y in &labels {
        let cluster = y * spec.clusters_per_class + rng.random_range(0..spec.clusters_per_class);
        for &c in centers.row(cluster) {
            data.push(c + noise.sample(rng));
        }
    }
    Split { x: Tensor::new(vec![n, spec.input_dim], data).expect("finite samples"), labels }
}

/// Gaussian clusters around random unit-norm centers. Labels are balanced
/// to within one per class.
pub fn generate_dataset(spec: &SyntheticTaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let k = spec.num_classes * spec.clusters_per_class;
    let mut centers = Vec::with_capacity(k * spec.input_dim);
    for _ in 0..k {
        let v: Vec<f64> = (0..spec.input_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = crate::autodiff::l2_norm(&v);
        centers.extend(v.iter().map(|x| x / norm));
    }
    let centers = Tensor::new(vec![k, spec.input_dim], centers)?;
    let train = sample_split(&mut rng, spec, &centers, spec.train_samples);
    let test = sample_split(&mut rng, spec, &centers, spec.test_samples);
    Ok(Dataset { spec: spec.clone(), train, test, centers })
}

fn labels_tensor(labels: &[usize]) -> Tensor {
    Tensor::new(vec![labels.len()], labels.iter().map(|&y| y as f64).collect()).expect("non-empty split")
}

fn labels_from(t: &Tensor, classes: usize) -> Result<Vec<usize>> {
    t.data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && (v as usize) < classes {
                Ok(v as usize)
            } else {
                Err(Error::Corrupt(format!("invalid label {v}")))
            }
        })
        .collect()
}

impl Dataset {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = json!({ "spec": serde_json::to_value(&self.spec)? });
        let train_y = labels_tensor(&self.train.labels);
        let test_y = labels_tensor(&self.test.labels);
        container::encode(
            DATASET_MAGIC,
            header,
            &[
                ("centers".into(), &self.centers),
                ("train.x".into(), &self.train.x),
                ("train.labels".into(), &train_y),
                ("test.x".into(), &self.test.x),
                ("test.labels".into(), &test_y),
            ],
        )
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, tensors) = container::decode(DATASET_MAGIC, bytes)?;
        let spec: SyntheticTaskSpec = serde_json::from_value(header["spec"].clone())
            .map_err(|e| Error::Corrupt(format!("dataset spec: {e}")))?;
        let names: Vec<&str> = tensors.iter().map(|(n, _)| n.as_str()).collect();
        if names != ["centers", "train.x", "train.labels", "test.x", "test.labels"] {
            return Err(Error::Corrupt(format!("unexpected tensor table {names:?}")));
        }
        let mut it = tensors.into_iter().map(|(_, t)| t);
        let centers = it.next().expect("checked");
        let (train_x, train_y, test_x, test_y) =
            (it.next().expect("checked"), it.next().expect("checked"), it.next().expect("checked"), it.next().expect("checked"));
        let split = |x: Tensor, y: &Tensor| -> Result<Split> {
            let labels = labels_from(y, spec.num_classes)?;
            if x.rank() != 2 || x.shape()[0] != labels.len() || x.shape()[1] != spec.input_dim {
                return Err(Error::Corrupt(format!("split of shape {:?} with {} labels", x.shape(), labels.len())));
            }
            Ok(Split { x, labels })
        };
        let train = split(train_x, &train_y)?;
        let test = split(test_x, &test_y)?;
        Ok(Dataset { spec, train, test, centers })
    }
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, dataset.to_bytes()?)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::from_bytes(&std::fs::read(path)?)
}
