use crate::plan::{BenchmarkPlan, MetricKind, NamedMethod};
use prototta::autodiff::Tensor;
use prototta::harness::{corrupt, load_dataset, make_batches, CorruptionKind, CorruptionSpec, Dataset};
use prototta::metrics::{self, ActivationRecord, Summary};
use prototta::model::{load_model, PrototypeModel};
use prototta::tta::{run_stream, AdaptationReport, Method, TtaConfig};
use prototta::{Error, Result};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Report groups in display order.
pub const GROUPS: [&str; 4] = ["noise", "blur", "weather", "digital"];

/// One (method, corruption, seed) stream.
#[derive(Debug, Clone)]
pub struct CellResult {
    pub method: String,
    pub corruption: CorruptionSpec,
    pub seed: u64,
    pub report: AdaptationReport,
    /// Model state at the end of the stream.
    pub adapted: PrototypeModel,
    /// Unadapted run over the same stream, timed right after this cell.
    pub reference: Option<AdaptationReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyRow {
    pub method: String,
    /// Seed-averaged accuracy per corruption, in plan order.
    pub per_corruption: Vec<f64>,
    /// `(group, mean)` for groups present in the plan.
    pub per_group: Vec<(String, f64)>,
    /// Mean and std across corruptions.
    pub total: Summary,
    /// Std across seeds of the per-seed mean over corruptions.
    pub seed_std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterpretabilityRow {
    pub method: String,
    pub pac: f64,
    pub pca_w: f64,
    pub pca_w_excluded: usize,
    pub stability: f64,
    pub selection_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimingRow {
    pub method: String,
    /// Median across cells of the per-cell relative speed, percent.
    pub relative_speed: f64,
    /// Median across cells of samples per second.
    pub throughput: f64,
}

#[derive(Debug, Clone)]
pub struct BenchmarkOutcome {
    pub cells: Vec<CellResult>,
    pub accuracy: Vec<AccuracyRow>,
    pub interpretability: Vec<InterpretabilityRow>,
    pub timing: Vec<TimingRow>,
}

/// Model and dataset checked against a plan.
#[derive(Debug, Clone)]
pub struct Workload {
    pub model: PrototypeModel,
    pub dataset: Dataset,
}

impl Workload {
    /// Loads and cross-checks the plan's files; every failure is a config
    /// error so nothing runs on a bad plan.
    pub fn load(plan: &BenchmarkPlan) -> Result<Self> {
        plan.validate()?;
        let model = load_model(&plan.model)
            .map_err(|e| Error::Config(format!("model {}: {e}", plan.model.display())))?;
        let dataset = load_dataset(&plan.dataset)
            .map_err(|e| Error::Config(format!("dataset {}: {e}", plan.dataset.display())))?;
        let cfg = &model.config;
        if cfg.backbone.input_dim != dataset.spec.input_dim || cfg.num_classes != dataset.spec.num_classes {
            return Err(Error::Config(format!(
                "model expects {}-d inputs over {} classes, dataset has {}-d inputs over {} classes",
                cfg.backbone.input_dim, cfg.num_classes, dataset.spec.input_dim, dataset.spec.num_classes
            )));
        }
        if plan.pca_k > model.num_prototypes() {
            return Err(Error::Config(format!("pca_k {} exceeds {} prototypes", plan.pca_k, model.num_prototypes())));
        }
        Ok(Self { model, dataset })
    }
}

/// Thread count from `PTTA_THREADS`, if set.
pub fn thread_cap() -> Result<Option<usize>> {
    match std::env::var("PTTA_THREADS") {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::Config(format!("PTTA_THREADS must be a positive integer, got `{v}`"))),
        },
    }
}

fn pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_cap()? {
        builder = builder.num_threads(n);
    }
    builder.build().map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn corruption_seed(spec: CorruptionSpec, seed: u64) -> u64 {
    let kind = CorruptionKind::ALL.iter().position(|k| *k == spec.kind).unwrap_or(0) as u64;
    seed.wrapping_mul(1_000_003).wrapping_add(kind * 16 + u64::from(spec.severity))
}

/// Sample id of test row `row` under `spec` and `seed`.
pub fn sample_id(spec: CorruptionSpec, seed: u64, row: usize) -> String {
    format!("{spec}/s{seed}/{row}")
}

/// The corrupted test split cut into batches of `batch_size`.
pub fn corrupted_stream(dataset: &Dataset, spec: CorruptionSpec, seed: u64, batch_size: usize) -> Vec<prototta::tta::Batch> {
    let x = corrupt(&dataset.test.x, spec, corruption_seed(spec, seed));
    make_batches(&x, &dataset.test.labels, batch_size, &format!("{spec}/s{seed}/"))
}

fn run_cell(work: &Workload, method: &NamedMethod, spec: CorruptionSpec, seed: u64) -> Result<CellResult> {
    let batches = corrupted_stream(&work.dataset, spec, seed, method.config.batch_size);
    let mut model = work.model.clone();
    let mut report = run_stream(&mut model, &batches, &method.config)?;
    for r in &mut report.activations {
        r.method.clone_from(&method.name);
    }
    if !model.prototypes.bit_eq(&work.model.prototypes) || !model.head.bit_eq(&work.model.head) {
        return Err(Error::Contract(format!("method `{}` modified prototypes or head", method.name)));
    }
    Ok(CellResult { method: method.name.clone(), corruption: spec, seed, report, adapted: model, reference: None })
}

fn run_timed_cell(work: &Workload, method: &NamedMethod, spec: CorruptionSpec, seed: u64, with_reference: bool) -> Result<CellResult> {
    let mut cell = run_cell(work, method, spec, seed)?;
    if with_reference {
        let config = TtaConfig { batch_size: method.config.batch_size, ..TtaConfig::for_method(Method::Unadapted) };
        let base = NamedMethod { name: "unadapted".into(), config };
        cell.reference = Some(run_cell(work, &base, spec, seed)?.report);
    }
    Ok(cell)
}

/// Runs every (method, corruption, seed) cell in parallel. Results come
/// back in plan order: methods, then corruptions, then seeds.
pub fn run_cells(plan: &BenchmarkPlan, work: &Workload) -> Result<Vec<CellResult>> {
    use rayon::prelude::*;
    let timed = plan.metrics.contains(&MetricKind::RelativeSpeed);
    let mut jobs = Vec::new();
    for m in &plan.methods {
        for &c in &plan.corruptions {
            for &s in &plan.seeds {
                jobs.push((m, c, s));
            }
        }
    }
    pool()?.install(|| jobs.par_iter().map(|&(m, c, s)| run_timed_cell(work, m, c, s, timed)).collect())
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn cells_of<'a>(cells: &'a [CellResult], method: &'a str) -> impl Iterator<Item = &'a CellResult> + 'a {
    cells.iter().filter(move |c| c.method == method)
}

/// Accuracy table from cell results.
pub fn accuracy_rows(plan: &BenchmarkPlan, cells: &[CellResult]) -> Vec<AccuracyRow> {
    let acc = |m: &str, c: CorruptionSpec, s: u64| {
        cells_of(cells, m)
            .find(|x| x.corruption == c && x.seed == s)
            .map(|x| x.report.accuracy())
            .expect("every cell was run")
    };
    plan.methods
        .iter()
        .map(|m| {
            let per_corruption: Vec<f64> = plan
                .corruptions
                .iter()
                .map(|&c| mean(&plan.seeds.iter().map(|&s| acc(&m.name, c, s)).collect::<Vec<_>>()))
                .collect();
            let per_group = GROUPS
                .iter()
                .filter_map(|g| {
                    let members: Vec<f64> = plan
                        .corruptions
                        .iter()
                        .zip(&per_corruption)
                        .filter(|(c, _)| c.kind.group() == *g)
                        .map(|(_, v)| *v)
                        .collect();
                    (!members.is_empty()).then(|| (g.to_string(), mean(&members)))
                })
                .collect();
            let per_seed: Vec<f64> = plan
                .seeds
                .iter()
                .map(|&s| mean(&plan.corruptions.iter().map(|&c| acc(&m.name, c, s)).collect::<Vec<_>>()))
                .collect();
            AccuracyRow {
                method: m.name.clone(),
                total: Summary::of(&per_corruption),
                per_corruption,
                per_group,
                seed_std: Summary::of(&per_seed).std,
            }
        })
        .collect()
}

fn pooled_records<'a>(cells: &'a [CellResult], method: &'a str) -> Vec<&'a ActivationRecord> {
    cells_of(cells, method).flat_map(|c| c.report.activations.iter()).collect()
}

fn interpretability_row(method: &str, cells: &[CellResult], model: &PrototypeModel, k: usize) -> Result<InterpretabilityRow> {
    let records: Vec<ActivationRecord> = pooled_records(cells, method).into_iter().cloned().collect();
    let pac = metrics::pac(&records)?.summary.mean;
    let p = model.num_prototypes();
    let data: Vec<f64> = records.iter().flat_map(|r| r.adapted_activations.iter().copied()).collect();
    let agg = Tensor::new(vec![records.len(), p], data)?;
    let gts: Vec<usize> = records.iter().map(|r| r.ground_truth).collect();
    let pca = metrics::pca_w(&agg, &model.head, &model.class_of, &gts, k)?;
    let adapted: Vec<usize> = records.iter().map(|r| r.adapted_prediction).collect();
    let clean: Vec<usize> = records.iter().map(|r| r.clean_prediction).collect();
    let (selected, total) = cells_of(cells, method).fold((0, 0), |(s, t), c| (s + c.report.selected(), t + c.report.total()));
    Ok(InterpretabilityRow {
        method: method.to_string(),
        pac,
        pca_w: pca.summary.mean,
        pca_w_excluded: pca.excluded,
        stability: metrics::prediction_stability(&adapted, &clean)?,
        selection_rate: 100.0 * selected as f64 / total.max(1) as f64,
    })
}

fn median(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    let mid = values.len() / 2;
    if values.len() % 2 == 1 {
        values[mid]
    } else {
        0.5 * (values[mid - 1] + values[mid])
    }
}

fn timing_rows(plan: &BenchmarkPlan, cells: &[CellResult]) -> Result<Vec<TimingRow>> {
    let mut rows = Vec::with_capacity(plan.methods.len());
    for m in &plan.methods {
        let mut speeds = Vec::new();
        let mut rates = Vec::new();
        for cell in cells_of(cells, &m.name) {
            let base = cell
                .reference
                .as_ref()
                .ok_or_else(|| Error::Measurement(format!("cell {} {} has no timing reference", cell.method, cell.corruption)))?;
            speeds.push(metrics::relative_speed(&cell.report, base)?);
            rates.push(metrics::median_throughput(&cell.report)?);
        }
        rows.push(TimingRow { method: m.name.clone(), relative_speed: median(speeds), throughput: median(rates) });
    }
    Ok(rows)
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

fn accuracy_header(plan: &BenchmarkPlan, rows: &[AccuracyRow]) -> Vec<String> {
    let mut header = vec!["method".to_string()];
    header.extend(plan.corruptions.iter().map(|c| c.to_string()));
    if let Some(first) = rows.first() {
        header.extend(first.per_group.iter().map(|(g, _)| format!("group:{g}")));
    }
    header.extend(["total_mean", "total_std", "seed_std"].map(String::from));
    header
}

fn accuracy_record(row: &AccuracyRow) -> Vec<String> {
    let mut rec = vec![row.method.clone()];
    rec.extend(row.per_corruption.iter().map(|v| num(*v)));
    rec.extend(row.per_group.iter().map(|(_, v)| num(*v)));
    rec.extend([num(row.total.mean), num(row.total.std), num(row.seed_std)]);
    rec
}

fn interpretability_columns(plan: &BenchmarkPlan) -> Vec<MetricKind> {
    let mut kinds: Vec<MetricKind> = plan.metrics.iter().copied().filter(|k| *k != MetricKind::RelativeSpeed).collect();
    kinds.sort();
    kinds.dedup();
    kinds
}

fn interpretability_record(row: &InterpretabilityRow, kinds: &[MetricKind]) -> Vec<String> {
    let mut rec = vec![row.method.clone()];
    for k in kinds {
        match k {
            MetricKind::Pac => rec.push(num(row.pac)),
            MetricKind::PcaW => rec.extend([num(row.pca_w), row.pca_w_excluded.to_string()]),
            MetricKind::Stability => rec.push(num(row.stability)),
            MetricKind::SelectionRate => rec.push(num(row.selection_rate)),
            MetricKind::RelativeSpeed => {}
        }
    }
    rec
}

fn interpretability_header(kinds: &[MetricKind]) -> Vec<String> {
    let mut header = vec!["method".to_string()];
    for k in kinds {
        match k {
            MetricKind::Pac => header.push("pac".into()),
            MetricKind::PcaW => header.extend(["pca_w".into(), "pca_w_excluded".into()]),
            MetricKind::Stability => header.push("stability".into()),
            MetricKind::SelectionRate => header.push("selection_rate".into()),
            MetricKind::RelativeSpeed => {}
        }
    }
    header
}

fn markdown(plan: &BenchmarkPlan, out: &BenchmarkOutcome) -> String {
    let mut md = String::from("# Benchmark\n\n");
    let _ = writeln!(md, "Seeds: {:?}. Accuracy in percent, mean over seeds.\n", plan.seeds);
    let mut header = accuracy_header(plan, &out.accuracy);
    header.truncate(header.len() - 3);
    header.extend(["total (mean ± std)".to_string(), "seed std".to_string()]);
    let _ = writeln!(md, "| {} |", header.join(" | "));
    let _ = writeln!(md, "|{}", "---|".repeat(header.len()));
    for row in &out.accuracy {
        let mut cells = vec![row.method.clone()];
        cells.extend(row.per_corruption.iter().map(|v| format!("{v:.2}")));
        cells.extend(row.per_group.iter().map(|(_, v)| format!("{v:.2}")));
        cells.extend([format!("{:.2} ± {:.2}", row.total.mean, row.total.std), format!("{:.2}", row.seed_std)]);
        let _ = writeln!(md, "| {} |", cells.join(" | "));
    }
    let kinds = interpretability_columns(plan);
    if !kinds.is_empty() {
        let header = interpretability_header(&kinds);
        let _ = writeln!(md, "\n## Interpretability\n\n| {} |", header.join(" | "));
        let _ = writeln!(md, "|{}", "---|".repeat(header.len()));
        for row in &out.interpretability {
            let cells: Vec<String> = interpretability_record(row, &kinds)
                .into_iter()
                .map(|c| c.parse::<f64>().map(|v| if v.fract() == 0.0 { format!("{v}") } else { format!("{v:.4}") }).unwrap_or(c))
                .collect();
            let _ = writeln!(md, "| {} |", cells.join(" | "));
        }
    }
    if !out.timing.is_empty() {
        let _ = writeln!(md, "\n## Efficiency\n\n| method | relative speed (%) | samples/s |\n|---|---|---|");
        for row in &out.timing {
            let _ = writeln!(md, "| {} | {:.1} | {:.0} |", row.method, row.relative_speed, row.throughput);
        }
    }
    md
}

/// Paths of the files written by [`write_outputs`].
pub fn output_paths(dir: &Path) -> [PathBuf; 5] {
    ["accuracy.csv", "cells.csv", "interpretability.csv", "timing.csv", "report.md"].map(|f| dir.join(f))
}

fn write_outputs(plan: &BenchmarkPlan, out: &BenchmarkOutcome) -> Result<()> {
    let dir = &plan.output_dir;
    std::fs::create_dir_all(dir.join("records"))?;
    let [accuracy, cells, interp, timing, report] = output_paths(dir);

    let rows: Vec<Vec<String>> = out.accuracy.iter().map(accuracy_record).collect();
    write_csv(&accuracy, &accuracy_header(plan, &out.accuracy), &rows)?;

    let header = ["method", "corruption", "seed", "correct", "total", "accuracy", "selected"].map(String::from);
    let rows: Vec<Vec<String>> = out
        .cells
        .iter()
        .map(|c| {
            vec![
                c.method.clone(),
                c.corruption.to_string(),
                c.seed.to_string(),
                c.report.correct().to_string(),
                c.report.total().to_string(),
                num(c.report.accuracy()),
                c.report.selected().to_string(),
            ]
        })
        .collect();
    write_csv(&cells, &header, &rows)?;

    let kinds = interpretability_columns(plan);
    let rows: Vec<Vec<String>> = out.interpretability.iter().map(|r| interpretability_record(r, &kinds)).collect();
    write_csv(&interp, &interpretability_header(&kinds), &rows)?;

    if out.timing.is_empty() {
        if timing.exists() {
            std::fs::remove_file(&timing)?;
        }
    } else {
        let rows: Vec<Vec<String>> =
            out.timing.iter().map(|r| vec![r.method.clone(), num(r.relative_speed), num(r.throughput)]).collect();
        write_csv(&timing, &["method", "relative_speed", "throughput"].map(String::from), &rows)?;
    }

    for m in &plan.methods {
        let records: Vec<ActivationRecord> = pooled_records(&out.cells, &m.name).into_iter().cloned().collect();
        metrics::write_records(&dir.join("records").join(format!("{}.jsonl", m.name)), &records)?;
    }
    std::fs::write(report, markdown(plan, out))?;
    Ok(())
}

/// Runs the plan and writes `accuracy.csv`, `cells.csv`,
/// `interpretability.csv`, `timing.csv`, `report.md` and
/// `records/<method>.jsonl` under the output directory.
pub fn run_benchmark(plan: &BenchmarkPlan) -> Result<BenchmarkOutcome> {
    let work = Workload::load(plan)?;
    let cells = run_cells(plan, &work)?;
    let accuracy = accuracy_rows(plan, &cells);
    let interpretability = plan
        .methods
        .iter()
        .map(|m| interpretability_row(&m.name, &cells, &work.model, plan.pca_k))
        .collect::<Result<Vec<_>>>()?;
    let timing = if plan.metrics.contains(&MetricKind::RelativeSpeed) {
        timing_rows(plan, &cells)?
    } else {
        Vec::new()
    };
    let out = BenchmarkOutcome { cells, accuracy, interpretability, timing };
    write_outputs(plan, &out)?;
    log::info!("benchmark written to {}", plan.output_dir.display());
    Ok(out)
}
