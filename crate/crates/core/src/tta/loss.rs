use super::{TargetScope, TtaConfig};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{BatchOutputs, MAPPING_EPS};

/// Samples admitted to the adaptation loss.
#[derive(Debug, Clone, PartialEq)]
pub struct ReliableSet {
    pub indices: Vec<usize>,
    pub confidences: Vec<f64>,
    pub target_sets: Vec<Vec<usize>>,
}

impl ReliableSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Every sample in the batch, each targeting the given prototypes.
    pub fn everything(outputs: &BatchOutputs, class_of: &[usize], scope: TargetScope) -> Self {
        let indices: Vec<usize> = (0..outputs.len()).collect();
        Self::from_indices(outputs, class_of, scope, indices)
    }

    fn from_indices(outputs: &BatchOutputs, class_of: &[usize], scope: TargetScope, indices: Vec<usize>) -> Self {
        let confidences = indices.iter().map(|&i| outputs.confidences[i]).collect();
        let target_sets = indices
            .iter()
            .map(|&i| match scope {
                TargetScope::TargetOnly => {
                    let y = outputs.pseudo_labels[i];
                    (0..class_of.len()).filter(|&p| class_of[p] == y).collect()
                }
                TargetScope::AllPrototypes => (0..class_of.len()).collect(),
            })
            .collect();
        Self { indices, confidences, target_sets }
    }
}

/// Shannon entropy (nats) of one probability row.
pub fn shannon_entropy(probs: &[f64]) -> f64 {
    -probs.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

/// Selects samples whose best mapped similarity exceeds `tau_sim`, optionally
/// also requiring prediction entropy below the cap.
pub fn geometric_filter(outputs: &BatchOutputs, class_of: &[usize], cfg: &TtaConfig) -> ReliableSet {
    let cap = cfg.entropy_cap_for(outputs.probs.last_dim());
    let indices = (0..outputs.len())
        .filter(|&i| {
            let best = outputs.mapped_sims.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let similar = !cfg.geometric_filter || best > cfg.tau_sim;
            let confident = !cfg.use_entropy_constraint || shannon_entropy(outputs.probs.row(i)) < cap;
            similar && confident
        })
        .collect();
    ReliableSet::from_indices(outputs, class_of, cfg.target_scope, indices)
}

/// Records elementwise binary entropy. Inputs are clamped to `[eps, 1 - eps]`.
pub fn binary_entropy_on_tape(tape: &mut Tape, s: Var) -> Result<Var> {
    if let Some(bad) = tape.value(s).data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Domain(format!("binary entropy of {bad}, outside [0, 1]")));
    }
    let s = tape.clamp(s, MAPPING_EPS, 1.0 - MAPPING_EPS)?;
    let log_s = tape.log(s)?;
    let neg = tape.scale(s, -1.0)?;
    let rest = tape.add_scalar(neg, 1.0)?;
    let log_rest = tape.log(rest)?;
    let a = tape.mul(s, log_s)?;
    let b = tape.mul(rest, log_rest)?;
    let total = tape.add(a, b)?;
    tape.scale(total, -1.0)
}

pub fn binary_entropy(s: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(s.clone());
    let h = binary_entropy_on_tape(&mut tape, v)?;
    Ok(tape.value(h).clone())
}

/// Per-(selected sample, prototype) weight `c_i w_p / |R|`, zero outside
/// the sample's target set.
fn loss_weights(outputs: &BatchOutputs, rel: &ReliableSet, head: &Tensor, cfg: &TtaConfig) -> Tensor {
    let p = head.shape()[1];
    let r = rel.len() as f64;
    let mut w = Tensor::zeros(&[rel.len(), p]);
    for (row, (&i, targets)) in rel.indices.iter().zip(&rel.target_sets).enumerate() {
        let y = outputs.pseudo_labels[i];
        let c = if cfg.weighting.uses_confidence() { rel.confidences[row] } else { 1.0 };
        let importance: Vec<f64> = targets.iter().map(|&q| head.row(y)[q].abs()).collect();
        let mass: f64 = importance.iter().sum();
        for (&q, imp) in targets.iter().zip(&importance) {
            let wp = if cfg.weighting.uses_importance() && mass > 0.0 {
                imp / mass
            } else {
                1.0 / targets.len() as f64
            };
            w.data_mut()[row * p + q] = c * wp / r;
        }
    }
    w
}

/// Confidence- and importance-weighted binary entropy of target-prototype
/// similarities, averaged over the reliable set.
pub fn prototta_loss(tape: &mut Tape, outputs: &BatchOutputs, rel: &ReliableSet, head: &Tensor, cfg: &TtaConfig) -> Result<Var> {
    if rel.is_empty() {
        return Err(Error::Contract("prototype loss over an empty reliable set; skip the update instead".into()));
    }
    let weights = tape.constant(loss_weights(outputs, rel, head, cfg));
    let selected = tape.index_select(outputs.vars.mapped_sims, &rel.indices)?;
    let h = binary_entropy_on_tape(tape, selected)?;
    let weighted = tape.mul(h, weights)?;
    tape.sum(weighted)
}

fn mean_prediction_entropy(tape: &mut Tape, logits: Var, rows: Option<&[usize]>) -> Result<Var> {
    let logits = match rows {
        Some(rows) => tape.index_select(logits, rows)?,
        None => logits,
    };
    let p = tape.softmax(logits)?;
    let log_p = tape.log_softmax(logits)?;
    let plogp = tape.mul(p, log_p)?;
    let per_row = tape.sum_last(plogp)?;
    let mean = tape.mean(per_row)?;
    tape.scale(mean, -1.0)
}

/// Mean Shannon entropy of the predicted class distribution over the batch.
pub fn tent_loss(tape: &mut Tape, outputs: &BatchOutputs) -> Result<Var> {
    mean_prediction_entropy(tape, outputs.vars.logits, None)
}

/// `w_proto * prototype loss + w_logit * prediction entropy`, both over the
/// reliable set.
pub fn hybrid_loss(tape: &mut Tape, outputs: &BatchOutputs, rel: &ReliableSet, head: &Tensor, cfg: &TtaConfig) -> Result<Var> {
    let proto = prototta_loss(tape, outputs, rel, head, cfg)?;
    let logit = mean_prediction_entropy(tape, outputs.vars.logits, Some(&rel.indices))?;
    let a = tape.scale(proto, cfg.hybrid_weights.w_proto)?;
    let b = tape.scale(logit, cfg.hybrid_weights.w_logit)?;
    tape.add(a, b)
}
