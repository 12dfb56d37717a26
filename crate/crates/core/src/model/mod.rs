//! Toy prototype classifier: MLP backbone with per-layer normalization, a
//! bank of class-owned prototypes split into sub-prototypes, and a linear
//! prototype-to-class head.

mod forward;
mod io;

pub use forward::{
    aggregate, log_inverse_scores, map_similarity, prototype_contributions, BatchOutputs, ForwardOptions, NormStats,
    OutputVars, MAPPING_EPS,
};
pub use io::{load_model, save_model, MODEL_MAGIC};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    LayerNorm,
    BatchNorm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub norm_kind: NormKind,
    /// Learnable additive bias after each norm.
    pub has_attention_bias: bool,
    /// Square linear mixing layer after the last hidden layer.
    pub has_onexone: bool,
}

/// How sub-prototype similarities collapse to one score per prototype.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Aggregation {
    Max,
    Mean,
    TopkMean { k: usize },
}

impl Aggregation {
    pub fn name(&self) -> String {
        match self {
            Aggregation::Max => "max".into(),
            Aggregation::Mean => "mean".into(),
            Aggregation::TopkMean { k } => format!("topk_mean(k={k})"),
        }
    }

    /// Top-k mean with `k = ceil(sub_prototypes / 2)`.
    pub fn default_topk(sub_prototypes: usize) -> Self {
        Aggregation::TopkMean { k: sub_prototypes.div_ceil(2).max(1) }
    }
}

/// Map from raw similarity (or distance) into `[eps, 1 - eps]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MappingScheme {
    Linear,
    TempSigmoid { tau_temp: f64 },
    LogInverseDistance,
}

impl MappingScheme {
    pub fn temp_sigmoid() -> Self {
        MappingScheme::TempSigmoid { tau_temp: 5.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub num_classes: usize,
    pub prototypes_per_class: usize,
    pub sub_prototypes: usize,
    pub aggregation: Aggregation,
    pub mapping: MappingScheme,
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig {
                input_dim: 32,
                hidden_dims: vec![64],
                norm_kind: NormKind::LayerNorm,
                has_attention_bias: true,
                has_onexone: true,
            },
            num_classes: 5,
            prototypes_per_class: 10,
            sub_prototypes: 4,
            aggregation: Aggregation::default_topk(4),
            mapping: MappingScheme::Linear,
            norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn num_prototypes(&self) -> usize {
        self.num_classes * self.prototypes_per_class
    }

    pub fn feature_dim(&self) -> usize {
        *self.backbone.hidden_dims.last().expect("validated: at least one hidden layer")
    }

    pub fn validate(&self) -> Result<()> {
        let b = &self.backbone;
        if b.input_dim == 0 || b.hidden_dims.is_empty() || b.hidden_dims.contains(&0) {
            return Err(Error::Config("backbone needs a positive input_dim and at least one positive hidden layer".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if self.prototypes_per_class == 0 || self.sub_prototypes == 0 {
            return Err(Error::Config("every class needs at least one prototype with one sub-prototype".into()));
        }
        if let Aggregation::TopkMean { k } = self.aggregation {
            if k == 0 || k > self.sub_prototypes {
                return Err(Error::Config(format!(
                    "top-k aggregation with k = {k} but only {} sub-prototypes",
                    self.sub_prototypes
                )));
            }
        }
        if let MappingScheme::TempSigmoid { tau_temp } = self.mapping {
            if !(tau_temp > 0.0) {
                return Err(Error::Config(format!("sigmoid temperature must be positive, got {tau_temp}")));
            }
        }
        if !(self.norm_eps >= 0.0) {
            return Err(Error::Config("norm_eps must be non-negative".into()));
        }
        Ok(())
    }
}

/// Linear layer, norm, optional additive bias, ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub attention_bias: Option<Tensor>,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mixing {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Role of a named model tensor, used to resolve adaptable subsets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorRole {
    Backbone,
    Norm,
    AddOn,
    Prototype,
    Head,
    Buffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeModel {
    pub config: ModelConfig,
    pub layers: Vec<HiddenLayer>,
    pub onexone: Option<Mixing>,
    /// `[P, K, D]` sub-prototype vectors.
    pub prototypes: Tensor,
    /// Owning class of each prototype.
    pub class_of: Vec<usize>,
    /// `[C, P]` prototype-to-class weights.
    pub head: Tensor,
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *v = z * std;
    }
    t
}

impl PrototypeModel {
    /// Deterministic initialization from `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut fan_in = config.backbone.input_dim;
        for &width in &config.backbone.hidden_dims {
            layers.push(HiddenLayer {
                weight: normal(&mut rng, &[fan_in, width], (2.0 / fan_in as f64).sqrt()),
                bias: Tensor::zeros(&[width]),
                gamma: Tensor::full(&[width], 1.0),
                beta: Tensor::zeros(&[width]),
                attention_bias: config.backbone.has_attention_bias.then(|| Tensor::zeros(&[width])),
                running_mean: Tensor::zeros(&[width]),
                running_var: Tensor::full(&[width], 1.0),
            });
            fan_in = width;
        }
        let d = config.feature_dim();
        let onexone = config.backbone.has_onexone.then(|| {
            let mut weight = normal(&mut rng, &[d, d], 0.1 / (d as f64).sqrt());
            for i in 0..d {
                weight.data_mut()[i * d + i] += 1.0;
            }
            Mixing { weight, bias: Tensor::zeros(&[d]) }
        });
        let p = config.num_prototypes();
        let prototypes = normal(&mut rng, &[p, config.sub_prototypes, d], 1.0);
        let class_of: Vec<usize> = (0..p).map(|i| i / config.prototypes_per_class).collect();
        let c = config.num_classes;
        let mut head = Tensor::zeros(&[c, p]);
        for cls in 0..c {
            for (j, &owner) in class_of.iter().enumerate() {
                head.data_mut()[cls * p + j] = if owner == cls { 1.0 } else { -0.5 };
            }
        }
        let model = Self { config, layers, onexone, prototypes, class_of, head };
        model.validate()?;
        Ok(model)
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn num_prototypes(&self) -> usize {
        self.class_of.len()
    }

    /// Checks the structural invariants of the bank and head.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let c = self.config.num_classes;
        let p = self.config.num_prototypes();
        let (k, d) = (self.config.sub_prototypes, self.config.feature_dim());
        if self.prototypes.shape() != [p, k, d] {
            return Err(Error::Dimension(format!(
                "prototype bank has shape {:?}, expected [{p}, {k}, {d}]",
                self.prototypes.shape()
            )));
        }
        if self.head.shape() != [c, p] {
            return Err(Error::Dimension(format!("head has shape {:?}, expected [{c}, {p}]", self.head.shape())));
        }
        if self.class_of.len() != p || self.class_of.iter().any(|&cls| cls >= c) {
            return Err(Error::Contract("prototype class assignment out of range".into()));
        }
        for cls in 0..c {
            if !self.class_of.contains(&cls) {
                return Err(Error::Contract(format!("class {cls} owns no prototype")));
            }
        }
        for (i, v) in self.prototypes.data().chunks_exact(d).enumerate() {
            if crate::autodiff::l2_norm(v) <= 1e-6 {
                return Err(Error::Degenerate(format!(
                    "sub-prototype {} of prototype {} has (near) zero norm",
                    i % k,
                    i / k
                )));
            }
        }
        Ok(())
    }

    /// Every tensor with its stable name, in file order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.weight"), &l.weight));
            out.push((format!("layers.{i}.bias"), &l.bias));
            out.push((format!("layers.{i}.norm.gamma"), &l.gamma));
            out.push((format!("layers.{i}.norm.beta"), &l.beta));
            if let Some(a) = &l.attention_bias {
                out.push((format!("layers.{i}.attention_bias"), a));
            }
            out.push((format!("layers.{i}.norm.running_mean"), &l.running_mean));
            out.push((format!("layers.{i}.norm.running_var"), &l.running_var));
        }
        if let Some(m) = &self.onexone {
            out.push(("onexone.weight".into(), &m.weight));
            out.push(("onexone.bias".into(), &m.bias));
        }
        out.push(("prototypes".into(), &self.prototypes));
        out.push(("head".into(), &self.head));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layers.{i}.weight"), &mut l.weight));
            out.push((format!("layers.{i}.bias"), &mut l.bias));
            out.push((format!("layers.{i}.norm.gamma"), &mut l.gamma));
            out.push((format!("layers.{i}.norm.beta"), &mut l.beta));
            if let Some(a) = &mut l.attention_bias {
                out.push((format!("layers.{i}.attention_bias"), a));
            }
            out.push((format!("layers.{i}.norm.running_mean"), &mut l.running_mean));
            out.push((format!("layers.{i}.norm.running_var"), &mut l.running_var));
        }
        if let Some(m) = &mut self.onexone {
            out.push(("onexone.weight".into(), &mut m.weight));
            out.push(("onexone.bias".into(), &mut m.bias));
        }
        out.push(("prototypes".into(), &mut self.prototypes));
        out.push(("head".into(), &mut self.head));
        out
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.named_tensors().into_iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn role(name: &str) -> TensorRole {
        if name == "prototypes" {
            TensorRole::Prototype
        } else if name == "head" {
            TensorRole::Head
        } else if name.ends_with("running_mean") || name.ends_with("running_var") {
            TensorRole::Buffer
        } else if name.ends_with("norm.gamma") || name.ends_with("norm.beta") {
            TensorRole::Norm
        } else if name.ends_with("attention_bias") || name.starts_with("onexone.") {
            TensorRole::AddOn
        } else {
            TensorRole::Backbone
        }
    }
}

/// Which parameters test-time adaptation may update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamMode {
    AllAdaptive,
    NormOnly,
    NormPlusAddons,
}

impl ParamMode {
    pub const ALL: [ParamMode; 3] = [ParamMode::AllAdaptive, ParamMode::NormOnly, ParamMode::NormPlusAddons];

    pub fn name(&self) -> &'static str {
        match self {
            ParamMode::AllAdaptive => "all_adaptive",
            ParamMode::NormOnly => "norm_only",
            ParamMode::NormPlusAddons => "norm_plus_addons",
        }
    }

    fn admits(&self, role: TensorRole) -> bool {
        match role {
            TensorRole::Norm => true,
            TensorRole::AddOn => matches!(self, ParamMode::NormPlusAddons | ParamMode::AllAdaptive),
            TensorRole::Backbone => matches!(self, ParamMode::AllAdaptive),
            TensorRole::Prototype | TensorRole::Head | TensorRole::Buffer => false,
        }
    }
}

/// Resolved list of adaptable tensor names for a model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdaptableParamSet {
    pub mode: ParamMode,
    pub names: Vec<String>,
}

impl AdaptableParamSet {
    pub fn resolve(model: &PrototypeModel, mode: ParamMode) -> Self {
        let names = model
            .named_tensors()
            .into_iter()
            .filter(|(n, _)| mode.admits(PrototypeModel::role(n)))
            .map(|(n, _)| n)
            .collect();
        Self { mode, names }
    }

    pub fn empty(mode: ParamMode) -> Self {
        Self { mode, names: Vec::new() }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.names.iter().any(|n| n == name)
    }

    /// Total scalar count over the resolved tensors.
    pub fn parameter_count(&self, model: &PrototypeModel) -> usize {
        self.names.iter().filter_map(|n| model.tensor(n)).map(Tensor::numel).sum()
    }
}

#[cfg(test)]
mod tests;
