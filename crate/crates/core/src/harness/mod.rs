//! Synthetic tasks, vector corruptions, source training and dataset files.

mod corrupt;
mod data;
mod train;

pub use corrupt::{corrupt, scale_contrast, CorruptionKind, CorruptionSpec};
pub use data::{generate_dataset, load_dataset, save_dataset, Dataset, Split, SyntheticTaskSpec, DATASET_MAGIC};
pub use train::{calibrate_running_stats, evaluate, train_source_model, TrainOptions, TrainReport};

use crate::autodiff::Tensor;
use crate::tta::Batch;

/// Cuts `split` (with inputs `x`) into consecutive batches; the last may be
/// short. Sample ids are `{prefix}{row}`.
pub fn make_batches(x: &Tensor, labels: &[usize], batch_size: usize, prefix: &str) -> Vec<Batch> {
    let d = x.last_dim();
    (0..labels.len())
        .step_by(batch_size.max(1))
        .map(|start| {
            let end = (start + batch_size).min(labels.len());
            let data = x.data()[start * d..end * d].to_vec();
            Batch {
                x: Tensor::new(vec![end - start, d], data).expect("rows of a valid tensor"),
                labels: labels[start..end].to_vec(),
                ids: (start..end).map(|i| format!("{prefix}{i}")).collect(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests;
