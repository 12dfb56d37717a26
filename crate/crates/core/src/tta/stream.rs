use super::loss::{geometric_filter, hybrid_loss, prototta_loss, tent_loss, ReliableSet};
use super::optim::{adam_step, OptimizerState};
use super::{Method, TtaConfig};
use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::metrics::ActivationRecord;
use crate::model::{AdaptableParamSet, BatchOutputs, ForwardOptions, NormStats, PrototypeModel};
use std::time::Instant;

/// One labeled test batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub ids: Vec<String>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub loss: Option<f64>,
    pub selected: usize,
    pub batch_size: usize,
    /// An adaptive method found no reliable sample and did not update.
    pub skipped: bool,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchRecord {
    pub index: usize,
    pub size: usize,
    pub correct: usize,
    /// Predictions equal to the clean model's on the same input.
    pub agree_clean: usize,
    pub loss: Option<f64>,
    pub selected: usize,
    pub skipped: bool,
    pub seconds: f64,
}

impl BatchRecord {
    pub fn accuracy(&self) -> f64 {
        100.0 * self.correct as f64 / self.size as f64
    }

    /// Equality ignoring wall-clock time.
    pub fn same_outcome(&self, other: &BatchRecord) -> bool {
        BatchRecord { seconds: 0.0, ..self.clone() } == BatchRecord { seconds: 0.0, ..other.clone() }
    }
}

#[derive(Debug, Clone)]
pub struct AdaptationReport {
    pub method: Method,
    pub batches: Vec<BatchRecord>,
    pub activations: Vec<ActivationRecord>,
}

impl AdaptationReport {
    pub fn total(&self) -> usize {
        self.batches.iter().map(|b| b.size).sum()
    }

    pub fn correct(&self) -> usize {
        self.batches.iter().map(|b| b.correct).sum()
    }

    pub fn selected(&self) -> usize {
        self.batches.iter().map(|b| b.selected).sum()
    }

    /// Cumulative accuracy in percent.
    pub fn accuracy(&self) -> f64 {
        100.0 * self.correct() as f64 / self.total().max(1) as f64
    }

    pub fn per_batch_accuracy(&self) -> Vec<f64> {
        self.batches.iter().map(BatchRecord::accuracy).collect()
    }
}

/// Predict on `x`, then take at most one optimizer step on the configured
/// parameter subset. Returned outputs come from the pre-update forward.
pub fn adapt_batch(
    model: &mut PrototypeModel,
    x: &Tensor,
    cfg: &TtaConfig,
    state: &mut OptimizerState,
) -> Result<(BatchOutputs, StepRecord)> {
    let start = Instant::now();
    let n = x.shape().first().copied().unwrap_or(0);
    if cfg.method == Method::Unadapted {
        let outputs = model.predict(x, model.eval_stats())?;
        let record = StepRecord { loss: None, selected: 0, batch_size: n, skipped: false, seconds: start.elapsed().as_secs_f64() };
        return Ok((outputs, record));
    }
    let params = AdaptableParamSet::resolve(model, cfg.param_mode);
    let opts = ForwardOptions { stats: NormStats::Batch, consensus: cfg.consensus, trainable: params.names.clone() };
    let mut tape = Tape::new();
    let outputs = model.forward(&mut tape, x, &opts)?;
    let rel = match cfg.method {
        Method::Tent => ReliableSet::everything(&outputs, &model.class_of, cfg.target_scope),
        _ => geometric_filter(&outputs, &model.class_of, cfg),
    };
    if rel.is_empty() || params.names.is_empty() {
        let record = StepRecord { loss: None, selected: 0, batch_size: n, skipped: true, seconds: start.elapsed().as_secs_f64() };
        return Ok((outputs, record));
    }
    let loss = match cfg.method {
        Method::Tent => tent_loss(&mut tape, &outputs)?,
        Method::Prototta => prototta_loss(&mut tape, &outputs, &rel, &model.head, cfg)?,
        Method::ProtottaPlus => hybrid_loss(&mut tape, &outputs, &rel, &model.head, cfg)?,
        Method::Unadapted => unreachable!("handled above"),
    };
    let loss_value = tape.value(loss).item()?;
    let grads = tape.backward(loss)?;
    let mut named = Vec::with_capacity(params.names.len());
    let mut grad_list = Vec::with_capacity(params.names.len());
    for (name, tensor) in model.named_tensors_mut() {
        if params.contains(&name) {
            let var = outputs
                .vars
                .param(&name)
                .ok_or_else(|| Error::Contract(format!("parameter {name} was not recorded")))?;
            grad_list.push(grads.get(var));
            named.push((name, tensor));
        }
    }
    adam_step(&mut named, &grad_list, state, &cfg.adam())?;
    let record = StepRecord {
        loss: Some(loss_value),
        selected: rel.len(),
        batch_size: n,
        skipped: false,
        seconds: start.elapsed().as_secs_f64(),
    };
    Ok((outputs, record))
}

/// Sequential adaptation over `batches`. The model as passed in serves as
/// the clean reference and, in episodic mode, as the reset point.
pub fn run_stream(model: &mut PrototypeModel, batches: &[Batch], cfg: &TtaConfig) -> Result<AdaptationReport> {
    cfg.validate()?;
    let clean = model.clone();
    let mut state = OptimizerState::new();
    let mut report = AdaptationReport { method: cfg.method, batches: Vec::new(), activations: Vec::new() };
    for (index, batch) in batches.iter().enumerate() {
        if batch.ids.len() != batch.len() || batch.x.shape().first() != Some(&batch.len()) {
            return Err(Error::Dimension(format!("batch {index} has inconsistent inputs, labels and ids")));
        }
        if cfg.episodic {
            *model = clean.clone();
            state = OptimizerState::new();
        }
        let reference = clean.predict(&batch.x, clean.eval_stats())?;
        let (outputs, step) = adapt_batch(model, &batch.x, cfg, &mut state)?;
        let mut correct = 0;
        let mut agree = 0;
        for i in 0..batch.len() {
            let pred = outputs.pseudo_labels[i];
            correct += usize::from(pred == batch.labels[i]);
            agree += usize::from(pred == reference.pseudo_labels[i]);
            report.activations.push(ActivationRecord {
                sample_id: batch.ids[i].clone(),
                method: cfg.method.name().to_string(),
                clean_activations: reference.agg_sims.row(i).to_vec(),
                adapted_activations: outputs.agg_sims.row(i).to_vec(),
                adapted_mapped: outputs.mapped_sims.row(i).to_vec(),
                clean_prediction: reference.pseudo_labels[i],
                adapted_prediction: pred,
                ground_truth: batch.labels[i],
            });
        }
        report.batches.push(BatchRecord {
            index,
            size: batch.len(),
            correct,
            agree_clean: agree,
            loss: step.loss,
            selected: step.selected,
            skipped: step.skipped,
            seconds: step.seconds,
        });
    }
    Ok(report)
}
