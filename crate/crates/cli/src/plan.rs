use prototta::harness::CorruptionSpec;
use prototta::tta::TtaConfig;
use prototta::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

/// Columns that may appear in `interpretability.csv`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Pac,
    PcaW,
    Stability,
    SelectionRate,
    RelativeSpeed,
}

impl MetricKind {
    pub const ALL: [MetricKind; 5] =
        [MetricKind::Pac, MetricKind::PcaW, MetricKind::Stability, MetricKind::SelectionRate, MetricKind::RelativeSpeed];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedMethod {
    pub name: String,
    #[serde(default)]
    pub config: TtaConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkPlan {
    pub model: PathBuf,
    pub dataset: PathBuf,
    pub corruptions: Vec<CorruptionSpec>,
    pub methods: Vec<NamedMethod>,
    #[serde(default = "all_metrics")]
    pub metrics: Vec<MetricKind>,
    pub output_dir: PathBuf,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Top set size for PCA-W.
    #[serde(default = "default_pca_k")]
    pub pca_k: usize,
}

fn all_metrics() -> Vec<MetricKind> {
    MetricKind::ALL.to_vec()
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_pca_k() -> usize {
    5
}

impl BenchmarkPlan {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("benchmark plan: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read plan {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Checks everything that can be checked without running a stream.
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::Config("plan lists no methods".into()));
        }
        if self.corruptions.is_empty() {
            return Err(Error::Config("plan lists no corruptions".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("plan lists no seeds".into()));
        }
        if self.pca_k == 0 {
            return Err(Error::Config("pca_k must be at least 1".into()));
        }
        let mut names = BTreeSet::new();
        for m in &self.methods {
            if m.name.is_empty() || !m.name.chars().all(|c| c.is_ascii_alphanumeric() || "_-.".contains(c)) {
                return Err(Error::Config(format!("method name `{}` must be non-empty [A-Za-z0-9_.-]", m.name)));
            }
            if !names.insert(m.name.as_str()) {
                return Err(Error::Config(format!("method name `{}` appears twice", m.name)));
            }
            m.config.validate().map_err(|e| Error::Config(format!("method `{}`: {e}", m.name)))?;
        }
        let corruptions: BTreeSet<_> = self.corruptions.iter().collect();
        if corruptions.len() != self.corruptions.len() {
            return Err(Error::Config("a corruption is listed twice".into()));
        }
        let seeds: BTreeSet<_> = self.seeds.iter().collect();
        if seeds.len() != self.seeds.len() {
            return Err(Error::Config("a seed is listed twice".into()));
        }
        for (what, path) in [("model", &self.model), ("dataset", &self.dataset)] {
            if !path.is_file() {
                return Err(Error::Config(format!("{what} file {} does not exist", path.display())));
            }
        }
        Ok(())
    }
}
