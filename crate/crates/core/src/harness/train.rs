use super::data::Split;
use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, ModelConfig, NormKind, NormStats, PrototypeModel, TensorRole};
use crate::tta::{adam_step, AdamHyper, OptimizerState};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Weight of the prototype-pull term relative to cross-entropy.
    pub pull_weight: f64,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { epochs: 30, batch_size: 64, lr: 5e-3, pull_weight: 0.1, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    /// Accuracy in percent on the training split after training.
    pub clean_accuracy: f64,
}

/// Percent of `split` classified correctly with evaluation statistics.
pub fn evaluate(model: &PrototypeModel, split: &Split) -> Result<f64> {
    let out = model.predict(&split.x, model.eval_stats())?;
    let correct = out.pseudo_labels.iter().zip(&split.labels).filter(|(p, y)| p == y).count();
    Ok(100.0 * correct as f64 / split.len().max(1) as f64)
}

fn trainable_names(model: &PrototypeModel) -> Vec<String> {
    model
        .named_tensors()
        .into_iter()
        .map(|(n, _)| n)
        .filter(|n| PrototypeModel::role(n) != TensorRole::Buffer)
        .collect()
}

/// Cross-entropy plus a pull of every sub-prototype toward its most similar
/// same-class feature in the batch.
fn batch_loss(model: &PrototypeModel, tape: &mut Tape, batch: &Split, opts: &TrainOptions, names: &[String]) -> Result<(crate::autodiff::Var, crate::model::OutputVars)> {
    let fwd = ForwardOptions { stats: NormStats::Batch, consensus: None, trainable: names.to_vec() };
    let out = model.forward(tape, &batch.x, &fwd)?;
    let (n, c) = (batch.len(), model.num_classes());
    let mut target = Tensor::zeros(&[n, c]);
    for (i, &y) in batch.labels.iter().enumerate() {
        target.data_mut()[i * c + y] = -1.0 / n as f64;
    }
    let target = tape.constant(target);
    let log_p = tape.log_softmax(out.vars.logits)?;
    let picked = tape.mul(log_p, target)?;
    let ce = tape.sum(picked)?;

    let (p, k) = (model.num_prototypes(), model.config.sub_prototypes);
    let flat = tape.reshape(out.vars.raw_sims, &[n, p * k])?;
    let by_sub = tape.transpose(flat)?;
    // Cosines live in [-1, 1]; a -4 offset rules out other-class samples.
    let mut mask = Tensor::zeros(&[p * k, n]);
    let mut weight = Tensor::zeros(&[p * k]);
    for s in 0..p * k {
        let owner = model.class_of[s / k];
        let mut any = false;
        for (i, &y) in batch.labels.iter().enumerate() {
            if y != owner {
                mask.data_mut()[s * n + i] = -4.0;
            } else {
                any = true;
            }
        }
        if any {
            weight.data_mut()[s] = 1.0;
        }
    }
    let active: f64 = weight.data().iter().sum();
    let mask = tape.constant(mask);
    let masked = tape.add(by_sub, mask)?;
    let best = tape.max_last(masked)?;
    let gap = tape.scale(best, -1.0)?;
    let gap = tape.add_scalar(gap, 1.0)?;
    let loss = if active > 0.0 {
        let w = tape.constant(Tensor::new(vec![p * k], weight.data().iter().map(|v| v * opts.pull_weight / active).collect())?);
        let weighted = tape.mul(gap, w)?;
        let pull = tape.sum(weighted)?;
        tape.add(ce, pull)?
    } else {
        ce
    };
    Ok((loss, out.vars))
}

/// Sets batch-norm running statistics from the full split, layer by layer.
pub fn calibrate_running_stats(model: &mut PrototypeModel, split: &Split) -> Result<()> {
    if model.config.backbone.norm_kind != NormKind::BatchNorm {
        return Ok(());
    }
    for l in 0..model.layers.len() {
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &split.x, &ForwardOptions::eval(NormStats::Running))?;
        let acts = tape.value(out.vars.pre_norm[l]);
        let (n, w) = (acts.shape()[0], acts.shape()[1]);
        let mut mean = vec![0.0; w];
        for row in acts.rows() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / n as f64;
            }
        }
        let mut var = vec![0.0; w];
        for row in acts.rows() {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m) / n as f64;
            }
        }
        model.layers[l].running_mean = Tensor::new(vec![w], mean)?;
        model.layers[l].running_var = Tensor::new(vec![w], var)?;
    }
    Ok(())
}

/// Trains backbone, prototypes and head jointly from a seeded
/// initialization. The split is only read.
pub fn train_source_model(train: &Split, config: ModelConfig, opts: &TrainOptions) -> Result<(PrototypeModel, TrainReport)> {
    if opts.batch_size < 2 || !(opts.lr > 0.0) || !(opts.pull_weight >= 0.0) {
        return Err(Error::Config("training needs batch_size >= 2, positive lr and non-negative pull weight".into()));
    }
    let mut model = PrototypeModel::init(config, opts.seed)?;
    if opts.epochs == 0 {
        let clean_accuracy = evaluate(&model, train)?;
        return Ok((model, TrainReport { epoch_losses: Vec::new(), clean_accuracy }));
    }
    let names = trainable_names(&model);
    let hyper = AdamHyper { lr: opts.lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
    let mut state = OptimizerState::new();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_losses = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(opts.batch_size) {
            // A single-sample batch has no batch statistics.
            if chunk.len() < 2 {
                continue;
            }
            let batch = train.subset(chunk);
            let mut tape = Tape::new();
            let (loss, vars) = batch_loss(&model, &mut tape, &batch, opts, &names)
                .map_err(|e| Error::Training { epoch, reason: e.to_string() })?;
            let value = tape.value(loss).item()?;
            if !value.is_finite() {
                return Err(Error::Training { epoch, reason: format!("loss became {value}") });
            }
            let grads = tape.backward(loss)?;
            let mut named = Vec::new();
            let mut grad_list = Vec::new();
            for (name, tensor) in model.named_tensors_mut() {
                if let Some(v) = vars.param(&name).filter(|_| names.contains(&name)) {
                    grad_list.push(grads.get(v));
                    named.push((name, tensor));
                }
            }
            adam_step(&mut named, &grad_list, &mut state, &hyper)?;
            total += value;
            batches += 1;
        }
        let mean = total / batches.max(1) as f64;
        log::debug!("epoch {epoch}: loss {mean:.5}");
        epoch_losses.push(mean);
    }
    calibrate_running_stats(&mut model, train)?;
    model.validate().map_err(|e| Error::Training { epoch: opts.epochs, reason: e.to_string() })?;
    let clean_accuracy = evaluate(&model, train)?;
    Ok((model, TrainReport { epoch_losses, clean_accuracy }))
}
