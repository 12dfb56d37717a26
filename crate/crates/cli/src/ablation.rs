use crate::bench::{accuracy_rows, run_cells, Workload};
use crate::plan::{BenchmarkPlan, NamedMethod};
use prototta::model::{Aggregation, ParamMode};
use prototta::tta::{Method, TargetScope, TtaConfig, Weighting};
use prototta::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

/// Edits one config field for an ablation setting.
pub type ConfigEdit = Box<dyn Fn(&mut TtaConfig)>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Filter,
    ParamMode,
    Consensus,
    TargetScope,
    Weighting,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 5] =
        [AblationAxis::Filter, AblationAxis::ParamMode, AblationAxis::Consensus, AblationAxis::TargetScope, AblationAxis::Weighting];

    pub fn name(&self) -> &'static str {
        match self {
            AblationAxis::Filter => "filter",
            AblationAxis::ParamMode => "param_mode",
            AblationAxis::Consensus => "consensus",
            AblationAxis::TargetScope => "target_scope",
            AblationAxis::Weighting => "weighting",
        }
    }

    /// `(label, edit)` for each setting along the axis. `sub_prototypes`
    /// sizes the top-k consensus.
    pub fn settings(&self, sub_prototypes: usize) -> Vec<(String, ConfigEdit)> {
        match self {
            AblationAxis::Filter => vec![
                ("with_filter".into(), Box::new(|c: &mut TtaConfig| c.geometric_filter = true)),
                ("no_filter".into(), Box::new(|c: &mut TtaConfig| c.geometric_filter = false)),
            ],
            AblationAxis::ParamMode => ParamMode::ALL
                .into_iter()
                .map(|m| (m.name().to_string(), Box::new(move |c: &mut TtaConfig| c.param_mode = m) as ConfigEdit))
                .collect(),
            AblationAxis::Consensus => [Aggregation::Mean, Aggregation::Max, Aggregation::default_topk(sub_prototypes)]
                .into_iter()
                .map(|a| {
                    let label = match a {
                        Aggregation::TopkMean { .. } => "topk_mean".to_string(),
                        other => other.name(),
                    };
                    (label, Box::new(move |c: &mut TtaConfig| c.consensus = Some(a)) as ConfigEdit)
                })
                .collect(),
            AblationAxis::TargetScope => [(TargetScope::TargetOnly, "target_only"), (TargetScope::AllPrototypes, "all_prototypes")]
                .into_iter()
                .map(|(s, label)| (label.to_string(), Box::new(move |c: &mut TtaConfig| c.target_scope = s) as ConfigEdit))
                .collect(),
            AblationAxis::Weighting => Weighting::ALL
                .into_iter()
                .map(|w| (w.name().to_string(), Box::new(move |c: &mut TtaConfig| c.weighting = w) as ConfigEdit))
                .collect(),
        }
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationAxis::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation axis `{s}`; expected one of filter, param_mode, consensus, target_scope, weighting")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub setting: String,
    pub method: String,
    /// Statistics across corruptions of seed-averaged accuracy.
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

/// `plan` with every adaptive method edited for one setting; unadapted
/// methods are dropped since no axis touches them.
pub fn plan_for_setting(plan: &BenchmarkPlan, edit: &dyn Fn(&mut TtaConfig)) -> BenchmarkPlan {
    let methods = plan
        .methods
        .iter()
        .filter(|m| m.config.method != Method::Unadapted)
        .map(|m| {
            let mut config = m.config.clone();
            edit(&mut config);
            NamedMethod { name: m.name.clone(), config }
        })
        .collect();
    BenchmarkPlan { methods, ..plan.clone() }
}

/// Runs the plan once per setting of `axis` and writes
/// `ablation_<axis>.csv` to the plan's output directory.
pub fn run_ablation(plan: &BenchmarkPlan, axis: AblationAxis) -> Result<Vec<AblationRow>> {
    let work = Workload::load(plan)?;
    if plan.methods.iter().all(|m| m.config.method == Method::Unadapted) {
        return Err(Error::Config("ablation needs at least one adaptive method".into()));
    }
    let mut rows = Vec::new();
    for (label, edit) in axis.settings(work.model.config.sub_prototypes) {
        let variant = plan_for_setting(plan, edit.as_ref());
        for m in &variant.methods {
            m.config.validate().map_err(|e| Error::Config(format!("setting {label}: {e}")))?;
        }
        let variant = BenchmarkPlan { metrics: Vec::new(), ..variant };
        let cells = run_cells(&variant, &work)?;
        for acc in accuracy_rows(&variant, &cells) {
            let v = &acc.per_corruption;
            rows.push(AblationRow {
                setting: label.clone(),
                method: acc.method,
                mean: acc.total.mean,
                std: acc.total.std,
                min: v.iter().copied().fold(f64::INFINITY, f64::min),
                max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            });
        }
    }
    std::fs::create_dir_all(&plan.output_dir)?;
    let path: PathBuf = plan.output_dir.join(format!("ablation_{axis}.csv"));
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record([axis.name(), "method", "mean", "std", "min", "max"])?;
    for r in &rows {
        w.write_record([r.setting.clone(), r.method.clone(), r.mean.to_string(), r.std.to_string(), r.min.to_string(), r.max.to_string()])?;
    }
    w.flush()?;
    log::info!("ablation over {axis} written to {}", path.display());
    Ok(rows)
}
