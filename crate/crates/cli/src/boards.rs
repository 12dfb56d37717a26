use prototta::autodiff::{top_indices, Tensor};
use prototta::metrics::ActivationRecord;
use prototta::model::{prototype_contributions, PrototypeModel};
use prototta::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoardEntry {
    pub prototype: usize,
    pub class: usize,
    /// Aggregated similarity times |head weight| for the ground-truth class.
    pub contribution: f64,
    pub raw_similarity: f64,
    pub mapped_similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReasoningBoard {
    /// `{method}:{sample_id}`.
    pub board_id: String,
    pub method: String,
    pub sample_id: String,
    pub predicted_class: usize,
    pub ground_truth: usize,
    pub k: usize,
    /// Top-`k` prototypes, contribution descending.
    pub prototypes: Vec<BoardEntry>,
}

impl ReasoningBoard {
    pub fn build(record: &ActivationRecord, model: &PrototypeModel, k: usize) -> Result<Self> {
        let p = model.num_prototypes();
        let id = format!("{}:{}", record.method, record.sample_id);
        if record.adapted_activations.len() != p || record.adapted_mapped.len() != p {
            return Err(Error::Export(format!(
                "record {id} has {} activations but the model has {p} prototypes",
                record.adapted_activations.len()
            )));
        }
        if record.ground_truth >= model.num_classes() || record.adapted_prediction >= model.num_classes() {
            return Err(Error::Export(format!("record {id} names a class the model does not have")));
        }
        if k == 0 || k > p {
            return Err(Error::Parameter(format!("board size {k} out of 1..={p}")));
        }
        let agg = Tensor::new(vec![1, p], record.adapted_activations.clone())?;
        let contributions = prototype_contributions(&agg, &model.head, record.ground_truth)?;
        let prototypes = top_indices(contributions.data(), k)
            .into_iter()
            .map(|i| BoardEntry {
                prototype: i,
                class: model.class_of[i],
                contribution: contributions.data()[i],
                raw_similarity: record.adapted_activations[i],
                mapped_similarity: record.adapted_mapped[i],
            })
            .collect();
        Ok(Self {
            board_id: id,
            method: record.method.clone(),
            sample_id: record.sample_id.clone(),
            predicted_class: record.adapted_prediction,
            ground_truth: record.ground_truth,
            k,
            prototypes,
        })
    }

    /// Sample-level PCA-W over the board's own entries.
    pub fn pca_w(&self) -> Result<Option<f64>> {
        let contributions: Vec<f64> = self.prototypes.iter().map(|e| e.contribution).collect();
        let classes: Vec<usize> = self.prototypes.iter().map(|e| e.class).collect();
        prototta::metrics::sample_pca_w(&contributions, &classes, self.ground_truth, self.k)
    }
}

fn file_stem(board_id: &str) -> String {
    board_id.chars().map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' }).collect()
}

/// Writes one `<board id>.json` per record under `dir` and returns the
/// paths in record order.
pub fn export_boards(records: &[ActivationRecord], model: &PrototypeModel, k: usize, dir: &Path) -> Result<Vec<PathBuf>> {
    let boards = records.iter().map(|r| ReasoningBoard::build(r, model, k)).collect::<Result<Vec<_>>>()?;
    let mut stems = BTreeSet::new();
    for b in &boards {
        if !stems.insert(file_stem(&b.board_id)) {
            return Err(Error::Export(format!("board id {} is duplicated or collides after escaping", b.board_id)));
        }
    }
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(boards.len());
    for b in &boards {
        let path = dir.join(format!("{}.json", file_stem(&b.board_id)));
        std::fs::write(&path, serde_json::to_string_pretty(b)?)?;
        paths.push(path);
    }
    Ok(paths)
}

/// All boards in `dir`, sorted by board id.
pub fn read_boards(dir: &Path) -> Result<Vec<ReasoningBoard>> {
    let mut boards = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "json") {
            let text = std::fs::read_to_string(&path)?;
            let board: ReasoningBoard =
                serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
            boards.push(board);
        }
    }
    boards.sort_by(|a, b| a.board_id.cmp(&b.board_id));
    Ok(boards)
}

/// Picks `n` items spread evenly over strata: each stratum is shuffled,
/// then strata are visited round-robin in key order. Returns indices into
/// `strata`, ascending.
pub fn stratified_sample(strata: &[String], n: usize, seed: u64) -> Vec<usize> {
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in strata.iter().enumerate() {
        groups.entry(s.as_str()).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut queues: Vec<std::vec::IntoIter<usize>> = groups
        .into_values()
        .map(|mut g| {
            g.shuffle(&mut rng);
            g.into_iter()
        })
        .collect();
    let mut picked = Vec::with_capacity(n.min(strata.len()));
    while picked.len() < n {
        let before = picked.len();
        for q in &mut queues {
            if picked.len() == n {
                break;
            }
            if let Some(i) = q.next() {
                picked.push(i);
            }
        }
        if picked.len() == before {
            break;
        }
    }
    picked.sort_unstable();
    picked
}

/// The corruption part of a benchmark sample id (`kind:severity/s<seed>/<row>`).
pub fn corruption_of(sample_id: &str) -> &str {
    sample_id.split('/').next().unwrap_or(sample_id)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stratified_sample_spreads_over_strata() {
        let strata: Vec<String> = (0..30).map(|i| ["a", "b", "c"][i % 3].repeat(1 + usize::from(i >= 27))).collect();
        let picked = stratified_sample(&strata, 7, 1);
        assert_eq!(picked.len(), 7);
        let mut counts = BTreeMap::new();
        for &i in &picked {
            *counts.entry(strata[i].as_str()).or_insert(0) += 1;
        }
        // Four strata: three large ones and a small one of three items.
        assert!(counts.values().all(|&c| c == 1 || c == 2), "{counts:?}");
        assert!(picked.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(picked, stratified_sample(&strata, 7, 1));
    }

    #[test]
    fn stratified_sample_caps_at_population() {
        let strata = vec!["x".to_string(), "y".to_string()];
        assert_eq!(stratified_sample(&strata, 10, 0), vec![0, 1]);
        assert!(stratified_sample(&strata, 0, 0).is_empty());
    }

    #[test]
    fn corruption_prefix() {
        assert_eq!(corruption_of("gaussian_noise:5/s0/17"), "gaussian_noise:5");
        assert_eq!(corruption_of("plain"), "plain");
    }

    #[test]
    fn file_stems_escape_separators() {
        assert_eq!(file_stem("tent:gaussian_noise:5/s0/3"), "tent_gaussian_noise_5_s0_3");
    }
}
