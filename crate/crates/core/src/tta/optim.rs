use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// First and second moments per named parameter, plus the step count.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimizerState {
    pub moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
    pub t: u64,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One bias-corrected Adam update of every `(name, param)` with the
/// matching entry of `grads`.
pub fn adam_step(
    params: &mut [(String, &mut Tensor)],
    grads: &[Tensor],
    state: &mut OptimizerState,
    hyper: &AdamHyper,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Contract(format!("{} parameters but {} gradients", params.len(), grads.len())));
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::Contract(format!(
                "gradient for {name} has shape {:?}, parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if let Some((m, _)) = state.moments.get(name) {
            if m.len() != p.numel() {
                return Err(Error::Contract(format!("optimizer moments for {name} have the wrong size")));
            }
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - hyper.beta1.powi(t);
    let c2 = 1.0 - hyper.beta2.powi(t);
    for ((name, p), g) in params.iter_mut().zip(grads) {
        let (m, v) = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| (vec![0.0; g.numel()], vec![0.0; g.numel()]));
        for (((x, gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = hyper.beta1 * *mi + (1.0 - hyper.beta1) * gi;
            *vi = hyper.beta2 * *vi + (1.0 - hyper.beta2) * gi * gi;
            *x -= hyper.lr * (*mi / c1) / ((*vi / c2).sqrt() + hyper.eps);
        }
    }
    Ok(())
}
