use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Central-difference gradient of a scalar function at `params`.
///
/// Each coordinate is estimated as `(f(p + eps e_i) - f(p - eps e_i)) / (2 eps)`.
pub fn finite_difference_grad<F>(mut f: F, params: &Tensor, eps: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Parameter(format!("finite-difference step {eps} outside [1e-7, 1e-3]")));
    }
    let mut probe = params.clone();
    let mut grad = Vec::with_capacity(params.numel());
    for i in 0..params.numel() {
        let base = params.data()[i];
        probe.data_mut()[i] = base + eps;
        let plus = f(&probe)?;
        probe.data_mut()[i] = base - eps;
        let minus = f(&probe)?;
        probe.data_mut()[i] = base;
        grad.push((plus - minus) / (2.0 * eps));
    }
    Tensor::new(params.shape().to_vec(), grad)
}

/// Largest coordinate-wise relative error `|a - n| / max(|a|, |n|, floor)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
