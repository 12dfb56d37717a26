//! Interpretability and efficiency metrics plus correlation statistics.

mod records;

pub use records::{read_records, read_scores, write_records};

use crate::autodiff::{l2_norm, top_indices, Tensor};
use crate::error::{Error, Result};
use crate::tta::AdaptationReport;
use serde::{Deserialize, Serialize};

/// One sample seen by both the clean and the adapted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationRecord {
    pub sample_id: String,
    pub method: String,
    pub clean_activations: Vec<f64>,
    pub adapted_activations: Vec<f64>,
    pub adapted_mapped: Vec<f64>,
    pub clean_prediction: usize,
    pub adapted_prediction: usize,
    pub ground_truth: usize,
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: f64::NAN, std: f64::NAN, n };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        Self { mean, std: var.sqrt(), n }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricResult {
    pub summary: Summary,
    pub per_sample: Vec<f64>,
    /// Samples left out because their denominator vanished.
    pub excluded: usize,
}

/// Cosine between clean-model and adapted-model activations, per sample.
pub fn pac(records: &[ActivationRecord]) -> Result<MetricResult> {
    if records.is_empty() {
        return Err(Error::InsufficientData("activation consistency needs at least one record".into()));
    }
    let mut per_sample = Vec::with_capacity(records.len());
    for r in records {
        if r.clean_activations.len() != r.adapted_activations.len() {
            return Err(Error::Dimension(format!("sample {} has activation vectors of different lengths", r.sample_id)));
        }
        let (a, b) = (l2_norm(&r.clean_activations), l2_norm(&r.adapted_activations));
        if a <= 1e-12 || b <= 1e-12 {
            return Err(Error::Degenerate(format!("sample {} has a zero activation vector", r.sample_id)));
        }
        let dot: f64 = r.clean_activations.iter().zip(&r.adapted_activations).map(|(x, y)| x * y).sum();
        per_sample.push((dot / (a * b)).clamp(-1.0, 1.0));
    }
    Ok(MetricResult { summary: Summary::of(&per_sample), per_sample, excluded: 0 })
}

/// Share of the top-`k` contribution mass owned by the ground-truth class,
/// where `contributions` are for that class. `None` when the top-`k` mass
/// is not positive.
pub fn sample_pca_w(contributions: &[f64], class_of: &[usize], y: usize, k: usize) -> Result<Option<f64>> {
    if contributions.len() != class_of.len() {
        return Err(Error::Dimension(format!(
            "{} contributions for {} prototypes",
            contributions.len(),
            class_of.len()
        )));
    }
    if k == 0 || k > contributions.len() {
        return Err(Error::Parameter(format!("top set of {k} out of {} prototypes", contributions.len())));
    }
    let top = top_indices(contributions, k);
    let total: f64 = top.iter().map(|&p| contributions[p]).sum();
    if !(total > 0.0) {
        return Ok(None);
    }
    let own: f64 = top.iter().filter(|&&p| class_of[p] == y).map(|&p| contributions[p]).sum();
    Ok(Some(own / total))
}

/// Contribution-weighted ground-truth share of each sample's top-`k`
/// prototypes, averaged over samples with positive mass.
pub fn pca_w(agg_sims: &Tensor, head: &Tensor, class_of: &[usize], ground_truths: &[usize], k: usize) -> Result<MetricResult> {
    if agg_sims.rank() != 2 || agg_sims.shape()[0] != ground_truths.len() {
        return Err(Error::Dimension(format!(
            "similarities {:?} for {} labels",
            agg_sims.shape(),
            ground_truths.len()
        )));
    }
    let mut per_sample = Vec::with_capacity(ground_truths.len());
    let mut excluded = 0;
    for (row, &y) in agg_sims.rows().zip(ground_truths) {
        let contributions = crate::model::prototype_contributions(
            &Tensor::new(vec![1, row.len()], row.to_vec())?,
            head,
            y,
        )?;
        match sample_pca_w(contributions.data(), class_of, y, k)? {
            Some(v) => per_sample.push(v),
            None => excluded += 1,
        }
    }
    if excluded > 0 {
        log::warn!("{excluded} samples excluded from PCA-W for zero contribution mass");
    }
    Ok(MetricResult { summary: Summary::of(&per_sample), per_sample, excluded })
}

/// Percentage of adapted predictions equal to the clean predictions.
pub fn prediction_stability(adapted: &[usize], clean: &[usize]) -> Result<f64> {
    if adapted.len() != clean.len() {
        return Err(Error::Dimension(format!("{} adapted vs {} clean predictions", adapted.len(), clean.len())));
    }
    if adapted.is_empty() {
        return Err(Error::InsufficientData("prediction stability needs at least one sample".into()));
    }
    let same = adapted.iter().zip(clean).filter(|(a, b)| a == b).count();
    Ok(100.0 * same as f64 / adapted.len() as f64)
}

/// Percentage of samples that entered an update.
pub fn selection_rate(report: &AdaptationReport) -> f64 {
    100.0 * report.selected() as f64 / report.total().max(1) as f64
}

/// Median per-batch throughput in samples per second, skipping the first
/// batch as warm-up when more than one is present.
pub fn median_throughput(report: &AdaptationReport) -> Result<f64> {
    let batches = if report.batches.len() > 1 { &report.batches[1..] } else { &report.batches[..] };
    if batches.is_empty() {
        return Err(Error::Measurement("no batches to time".into()));
    }
    let mut rates = Vec::with_capacity(batches.len());
    for b in batches {
        if !(b.seconds > 0.0) {
            return Err(Error::Measurement(format!("batch {} has zero recorded duration", b.index)));
        }
        rates.push(b.size as f64 / b.seconds);
    }
    rates.sort_by(f64::total_cmp);
    let mid = rates.len() / 2;
    Ok(if rates.len() % 2 == 1 { rates[mid] } else { 0.5 * (rates[mid - 1] + rates[mid]) })
}

/// Adapted throughput as a percentage of the unadapted throughput.
pub fn relative_speed(report: &AdaptationReport, unadapted: &AdaptationReport) -> Result<f64> {
    Ok(100.0 * median_throughput(report)? / median_throughput(unadapted)?)
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Dimension(format!("correlation of {} and {} values", x.len(), y.len())));
    }
    if x.len() < 3 {
        return Err(Error::InsufficientData(format!("correlation needs at least 3 pairs, got {}", x.len())));
    }
    Ok(())
}

/// Product-moment correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(Error::UndefinedCorrelation("one input has zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

/// Rank correlation: Pearson of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    pearson(&average_ranks(x), &average_ranks(y))
}
