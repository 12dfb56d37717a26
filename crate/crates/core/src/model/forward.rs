use super::{Aggregation, MappingScheme, NormKind, PrototypeModel};
use crate::autodiff::{argmax, l2_norm, Tape, Tensor, Var, MIN_NORM};
use crate::error::{Error, Result};

/// Clamp margin applied to every mapped similarity.
pub const MAPPING_EPS: f64 = 1e-7;

/// Which statistics batch-norm layers use. Layer norm ignores this.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormStats {
    Batch,
    Running,
}

#[derive(Debug, Clone)]
pub struct ForwardOptions {
    pub stats: NormStats,
    /// Aggregation used for the mapped similarities instead of the bank's
    /// own. Logits always use the bank aggregation.
    pub consensus: Option<Aggregation>,
    /// Tensor names recorded as differentiation targets.
    pub trainable: Vec<String>,
}

impl ForwardOptions {
    pub fn eval(stats: NormStats) -> Self {
        Self { stats, consensus: None, trainable: Vec::new() }
    }
}

/// Tape handles for the forward values and the recorded parameters.
#[derive(Debug, Clone)]
pub struct OutputVars {
    pub features: Var,
    pub raw_sims: Var,
    pub agg_sims: Var,
    pub mapped_sims: Var,
    pub logits: Var,
    pub probs: Var,
    pub params: Vec<(String, Var)>,
    /// Linear output of each hidden layer, before its norm.
    pub pre_norm: Vec<Var>,
}

impl OutputVars {
    pub fn param(&self, name: &str) -> Option<Var> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

#[derive(Debug, Clone)]
pub struct BatchOutputs {
    pub features: Tensor,
    /// `[n, P, K]` cosine similarities.
    pub raw_sims: Tensor,
    /// `[n, P]` bank-aggregated similarities.
    pub agg_sims: Tensor,
    /// `[n, P]` mapped similarities in `[eps, 1 - eps]`.
    pub mapped_sims: Tensor,
    pub logits: Tensor,
    pub probs: Tensor,
    pub pseudo_labels: Vec<usize>,
    pub confidences: Vec<f64>,
    pub vars: OutputVars,
}

impl BatchOutputs {
    pub fn len(&self) -> usize {
        self.pseudo_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pseudo_labels.is_empty()
    }

    /// Outputs assembled from given `[n, P]` similarities and `[n, C]`
    /// logits, with the mapped similarities and logits recorded as
    /// differentiable leaves. Raw similarities get a singleton sub-prototype
    /// axis.
    pub fn from_scores(tape: &mut Tape, agg_sims: Tensor, mapped_sims: Tensor, logits: Tensor) -> Result<Self> {
        if agg_sims.rank() != 2
            || mapped_sims.shape() != agg_sims.shape()
            || logits.rank() != 2
            || logits.shape()[0] != agg_sims.shape()[0]
        {
            return Err(Error::Dimension(format!(
                "scores {:?}, mapped {:?}, logits {:?}",
                agg_sims.shape(),
                mapped_sims.shape(),
                logits.shape()
            )));
        }
        let (n, p) = (agg_sims.shape()[0], agg_sims.shape()[1]);
        let agg = tape.constant(agg_sims.clone());
        let raw = tape.reshape(agg, &[n, p, 1])?;
        let mapped = tape.variable(&mapped_sims);
        let logit_var = tape.variable(&logits);
        let probs = tape.softmax(logit_var)?;
        let probs_t = tape.value(probs).clone();
        let pseudo_labels: Vec<usize> = probs_t.rows().map(argmax).collect();
        let confidences = probs_t.rows().zip(&pseudo_labels).map(|(r, &j)| r[j]).collect();
        Ok(Self {
            features: agg_sims.clone(),
            raw_sims: tape.value(raw).clone(),
            agg_sims,
            mapped_sims,
            logits,
            probs: probs_t,
            pseudo_labels,
            confidences,
            vars: OutputVars { features: agg, raw_sims: raw, agg_sims: agg, mapped_sims: mapped, logits: logit_var, probs, params: Vec::new(), pre_norm: Vec::new() },
        })
    }
}

/// Records aggregation of the last axis on `tape`.
pub fn aggregate(tape: &mut Tape, x: Var, aggregation: Aggregation) -> Result<Var> {
    match aggregation {
        Aggregation::Max => tape.max_last(x),
        Aggregation::Mean => tape.mean_last(x),
        Aggregation::TopkMean { k } => tape.topk_mean(x, k),
    }
}

fn check_domain(values: &Tensor, scheme: MappingScheme) -> Result<()> {
    const TOL: f64 = 1e-6;
    let bad = match scheme {
        MappingScheme::Linear | MappingScheme::TempSigmoid { .. } => {
            values.data().iter().position(|v| !(-1.0 - TOL..=1.0 + TOL).contains(v))
        }
        MappingScheme::LogInverseDistance => values.data().iter().position(|&v| v < -TOL),
    };
    match bad {
        Some(i) => Err(Error::Domain(format!(
            "value {} at flat index {i} outside the domain of the {scheme:?} mapping",
            values.data()[i]
        ))),
        None => Ok(()),
    }
}

fn log_inverse_on_tape(tape: &mut Tape, dist: Var) -> Result<Var> {
    let num = tape.add_scalar(dist, 1.0)?;
    let den = tape.add_scalar(dist, 1e-4)?;
    let log_num = tape.log(num)?;
    let log_den = tape.log(den)?;
    tape.sub(log_num, log_den)
}

/// Log-inverse distance kernel `ln((d + 1) / (d + 1e-4))` before batch
/// normalization.
pub fn log_inverse_scores(dist: &Tensor) -> Result<Tensor> {
    check_domain(dist, MappingScheme::LogInverseDistance)?;
    let mut tape = Tape::new();
    let d = tape.constant(dist.clone());
    let s = log_inverse_on_tape(&mut tape, d)?;
    Ok(tape.value(s).clone())
}

/// Records the mapping of `raw` into `[eps, 1 - eps]`. For the log-inverse
/// kernel `raw` holds squared distances; otherwise cosine similarities.
pub(crate) fn map_on_tape(tape: &mut Tape, raw: Var, scheme: MappingScheme) -> Result<Var> {
    check_domain(tape.value(raw), scheme)?;
    let unclamped = match scheme {
        MappingScheme::Linear => {
            let half = tape.scale(raw, 0.5)?;
            tape.add_scalar(half, 0.5)?
        }
        MappingScheme::TempSigmoid { tau_temp } => {
            let z = tape.scale(raw, tau_temp)?;
            tape.sigmoid(z)?
        }
        MappingScheme::LogInverseDistance => {
            let s = log_inverse_on_tape(tape, raw)?;
            let hi = tape.max_all(s)?;
            let lo = tape.min_all(s)?;
            let range = tape.value(hi).item()? - tape.value(lo).item()?;
            if range <= 1e-12 {
                // Every entry equal: no ordering information survives.
                let shape = tape.shape(s).to_vec();
                tape.constant(Tensor::full(&shape, 0.5))
            } else {
                let shifted = tape.sub(s, lo)?;
                let width = tape.sub(hi, lo)?;
                tape.div(shifted, width)?
            }
        }
    };
    tape.clamp(unclamped, MAPPING_EPS, 1.0 - MAPPING_EPS)
}

/// Maps raw similarities (or squared distances for the log-inverse kernel)
/// into `[eps, 1 - eps]`.
pub fn map_similarity(raw: &Tensor, scheme: MappingScheme) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(raw.clone());
    let y = map_on_tape(&mut tape, x, scheme)?;
    Ok(tape.value(y).clone())
}

/// `contribution[i, p] = agg_sims[i, p] * |head[class, p]|`.
pub fn prototype_contributions(agg_sims: &Tensor, head: &Tensor, class: usize) -> Result<Tensor> {
    let (c, p) = (head.shape()[0], head.shape()[1]);
    if class >= c {
        return Err(Error::Parameter(format!("class {class} out of range for {c} classes")));
    }
    if agg_sims.rank() != 2 || agg_sims.shape()[1] != p {
        return Err(Error::Dimension(format!(
            "similarities of shape {:?} against a head over {p} prototypes",
            agg_sims.shape()
        )));
    }
    let w = head.row(class);
    let data = agg_sims.rows().flat_map(|row| row.iter().zip(w).map(|(a, b)| a * b.abs())).collect();
    Tensor::new(agg_sims.shape().to_vec(), data)
}

impl PrototypeModel {
    fn record(&self, tape: &mut Tape, name: &str, t: &Tensor, opts: &ForwardOptions, params: &mut Vec<(String, Var)>) -> Var {
        let v = if opts.trainable.iter().any(|n| n == name) {
            tape.variable(t)
        } else {
            tape.constant(t.clone())
        };
        params.push((name.to_string(), v));
        v
    }

    /// Full forward pass recorded on `tape`.
    pub fn forward(&self, tape: &mut Tape, x: &Tensor, opts: &ForwardOptions) -> Result<BatchOutputs> {
        let cfg = &self.config;
        if x.rank() != 2 || x.shape()[1] != cfg.backbone.input_dim {
            return Err(Error::Dimension(format!(
                "input of shape {:?}, expected [n, {}]",
                x.shape(),
                cfg.backbone.input_dim
            )));
        }
        if !x.is_finite() {
            return Err(Error::Domain("input contains non-finite values".into()));
        }
        let n = x.shape()[0];
        let mut params = Vec::new();
        let mut pre_norm = Vec::with_capacity(self.layers.len());
        let mut h = tape.constant(x.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            let w = self.record(tape, &format!("layers.{i}.weight"), &layer.weight, opts, &mut params);
            let b = self.record(tape, &format!("layers.{i}.bias"), &layer.bias, opts, &mut params);
            let gamma = self.record(tape, &format!("layers.{i}.norm.gamma"), &layer.gamma, opts, &mut params);
            let beta = self.record(tape, &format!("layers.{i}.norm.beta"), &layer.beta, opts, &mut params);
            let lin = tape.matmul(h, w)?;
            let lin = tape.add(lin, b)?;
            pre_norm.push(lin);
            let z = match (cfg.backbone.norm_kind, opts.stats) {
                (NormKind::LayerNorm, _) => tape.standardize(lin, cfg.norm_eps)?,
                (NormKind::BatchNorm, NormStats::Batch) => {
                    let t = tape.transpose(lin)?;
                    let s = tape.standardize(t, cfg.norm_eps)?;
                    tape.transpose(s)?
                }
                (NormKind::BatchNorm, NormStats::Running) => {
                    let mean = tape.constant(layer.running_mean.clone());
                    let inv: Vec<f64> =
                        layer.running_var.data().iter().map(|v| 1.0 / (v + cfg.norm_eps).sqrt()).collect();
                    let inv = tape.constant(Tensor::new(vec![inv.len()], inv)?);
                    let centered = tape.sub(lin, mean)?;
                    tape.mul(centered, inv)?
                }
            };
            let scaled = tape.mul(z, gamma)?;
            let mut out = tape.add(scaled, beta)?;
            if let Some(a) = &layer.attention_bias {
                let av = self.record(tape, &format!("layers.{i}.attention_bias"), a, opts, &mut params);
                out = tape.add(out, av)?;
            }
            h = tape.relu(out)?;
        }
        if let Some(m) = &self.onexone {
            let w = self.record(tape, "onexone.weight", &m.weight, opts, &mut params);
            let b = self.record(tape, "onexone.bias", &m.bias, opts, &mut params);
            let mixed = tape.matmul(h, w)?;
            h = tape.add(mixed, b)?;
        }
        let features = h;
        let d = cfg.feature_dim();
        for (i, row) in tape.value(features).rows().enumerate() {
            if l2_norm(row) <= MIN_NORM {
                return Err(Error::Degenerate(format!("feature vector of sample {i} collapsed to zero norm")));
            }
        }
        let (p, k) = (self.num_prototypes(), cfg.sub_prototypes);
        let protos = self.record(tape, "prototypes", &self.prototypes, opts, &mut params);
        let head = self.record(tape, "head", &self.head, opts, &mut params);
        let unit_f = tape.l2_normalize(features)?;
        let flat = tape.reshape(protos, &[p * k, d])?;
        let unit_p = tape.l2_normalize(flat)?;
        let unit_pt = tape.transpose(unit_p)?;
        let dots = tape.matmul(unit_f, unit_pt)?;
        let cos = tape.clamp(dots, -1.0, 1.0)?;
        let raw = tape.reshape(cos, &[n, p, k])?;
        let agg = aggregate(tape, raw, cfg.aggregation)?;
        let head_t = tape.transpose(head)?;
        let logits = tape.matmul(agg, head_t)?;
        let probs = tape.softmax(logits)?;
        let consensus = match opts.consensus {
            Some(a) if a != cfg.aggregation => aggregate(tape, raw, a)?,
            _ => agg,
        };
        let mapped = match cfg.mapping {
            MappingScheme::LogInverseDistance => {
                // Squared distance between unit vectors.
                let neg = tape.scale(consensus, -2.0)?;
                let dist = tape.add_scalar(neg, 2.0)?;
                map_on_tape(tape, dist, cfg.mapping)?
            }
            scheme => map_on_tape(tape, consensus, scheme)?,
        };
        let probs_t = tape.value(probs).clone();
        let pseudo_labels: Vec<usize> = probs_t.rows().map(argmax).collect();
        let confidences = probs_t.rows().zip(&pseudo_labels).map(|(r, &j)| r[j]).collect();
        Ok(BatchOutputs {
            features: tape.value(features).clone(),
            raw_sims: tape.value(raw).clone(),
            agg_sims: tape.value(agg).clone(),
            mapped_sims: tape.value(mapped).clone(),
            logits: tape.value(logits).clone(),
            probs: probs_t,
            pseudo_labels,
            confidences,
            vars: OutputVars { features, raw_sims: raw, agg_sims: agg, mapped_sims: mapped, logits, probs, params, pre_norm },
        })
    }

    /// Forward pass on a throwaway tape with no differentiation targets.
    pub fn predict(&self, x: &Tensor, stats: NormStats) -> Result<BatchOutputs> {
        self.forward(&mut Tape::new(), x, &ForwardOptions::eval(stats))
    }

    /// Plain evaluation statistics appropriate to the norm kind.
    pub fn eval_stats(&self) -> NormStats {
        match self.config.backbone.norm_kind {
            NormKind::LayerNorm => NormStats::Batch,
            NormKind::BatchNorm => NormStats::Running,
        }
    }
}
