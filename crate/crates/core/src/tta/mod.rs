//! Test-time adaptation: reliable-sample filtering, the prototype entropy
//! objective and its baselines, Adam, and stream drivers.

mod loss;
mod optim;
mod stream;

pub use loss::{
    binary_entropy, binary_entropy_on_tape, geometric_filter, hybrid_loss, prototta_loss,
    shannon_entropy, tent_loss, ReliableSet,
};
pub use optim::{adam_step, AdamHyper, OptimizerState};
pub use stream::{adapt_batch, run_stream, AdaptationReport, Batch, BatchRecord, StepRecord};

use crate::error::{Error, Result};
use crate::model::{Aggregation, ParamMode};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Unadapted,
    Tent,
    Prototta,
    ProtottaPlus,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Unadapted => "unadapted",
            Method::Tent => "tent",
            Method::Prototta => "prototta",
            Method::ProtottaPlus => "prototta_plus",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetScope {
    TargetOnly,
    AllPrototypes,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    None,
    ImportanceOnly,
    ConfidenceOnly,
    Both,
}

impl Weighting {
    pub const ALL: [Weighting; 4] =
        [Weighting::None, Weighting::ImportanceOnly, Weighting::ConfidenceOnly, Weighting::Both];

    pub fn uses_importance(&self) -> bool {
        matches!(self, Weighting::ImportanceOnly | Weighting::Both)
    }

    pub fn uses_confidence(&self) -> bool {
        matches!(self, Weighting::ConfidenceOnly | Weighting::Both)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Weighting::None => "none",
            Weighting::ImportanceOnly => "importance_only",
            Weighting::ConfidenceOnly => "confidence_only",
            Weighting::Both => "both",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HybridWeights {
    pub w_proto: f64,
    pub w_logit: f64,
}

impl Default for HybridWeights {
    fn default() -> Self {
        Self { w_proto: 0.7, w_logit: 0.3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TtaConfig {
    pub method: Method,
    pub tau_sim: f64,
    /// When false every sample passes the similarity test (filter ablation).
    pub geometric_filter: bool,
    pub use_entropy_constraint: bool,
    /// `None` means half the maximum prediction entropy, `0.5 ln C`.
    pub entropy_cap: Option<f64>,
    pub param_mode: ParamMode,
    /// Aggregation for the adaptation signal; `None` keeps the bank's own.
    pub consensus: Option<Aggregation>,
    pub target_scope: TargetScope,
    pub weighting: Weighting,
    pub hybrid_weights: HybridWeights,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub episodic: bool,
}

impl Default for TtaConfig {
    fn default() -> Self {
        Self {
            method: Method::Prototta,
            tau_sim: 0.6,
            geometric_filter: true,
            use_entropy_constraint: false,
            entropy_cap: None,
            param_mode: ParamMode::NormPlusAddons,
            consensus: None,
            target_scope: TargetScope::TargetOnly,
            weighting: Weighting::Both,
            hybrid_weights: HybridWeights::default(),
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 128,
            episodic: false,
        }
    }
}

impl TtaConfig {
    pub fn for_method(method: Method) -> Self {
        Self { method, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.hybrid_weights;
        if !(h.w_proto >= 0.0 && h.w_logit >= 0.0 && (h.w_proto + h.w_logit - 1.0).abs() < 1e-9) {
            return Err(Error::Config(format!(
                "hybrid weights must be non-negative and sum to 1, got {} + {}",
                h.w_proto, h.w_logit
            )));
        }
        if !(self.tau_sim > 0.0 && self.tau_sim < 1.0) {
            return Err(Error::Config(format!("tau_sim must lie in (0, 1), got {}", self.tau_sim)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam_eps must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if let Some(cap) = self.entropy_cap {
            if !(cap > 0.0) {
                return Err(Error::Config(format!("entropy_cap must be positive, got {cap}")));
            }
        }
        if let Some(Aggregation::TopkMean { k: 0 }) = self.consensus {
            return Err(Error::Config("consensus top-k needs k >= 1".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.adam_eps }
    }

    pub fn entropy_cap_for(&self, num_classes: usize) -> f64 {
        self.entropy_cap.unwrap_or(0.5 * (num_classes as f64).ln())
    }
}
