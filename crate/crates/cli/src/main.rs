use clap::{Args, Parser, Subcommand};
use prototta::harness::{generate_dataset, load_dataset, save_dataset, train_source_model, evaluate, SyntheticTaskSpec};
use prototta::metrics::read_records;
use prototta::model::{load_model, save_model};
use prototta::{Error, Result};
use prototta_cli::boards::corruption_of;
use prototta_cli::config::{layered, read_json, set_path, TrainSetup};
use prototta_cli::{correlate_scores, export_boards, run_ablation, run_benchmark, stratified_sample, AblationAxis, BenchmarkPlan};
use serde_json::{json, Value};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "prototta", version, about = "Prototype-guided test-time adaptation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file.
    GenData(GenData),
    /// Train a source model on a dataset's train split.
    Train(Train),
    /// Run a benchmark plan.
    Bench(Bench),
    /// Run a plan across the settings of one ablation axis.
    Ablate(Ablate),
    /// Export reasoning boards from activation records.
    Boards(Boards),
    /// Correlate board PCA-W with external per-sample scores.
    Correlate(Correlate),
}

#[derive(Args)]
struct GenData {
    /// JSON task spec; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    num_classes: Option<usize>,
    #[arg(long)]
    input_dim: Option<usize>,
    #[arg(long)]
    clusters_per_class: Option<usize>,
    #[arg(long)]
    cluster_spread: Option<f64>,
    #[arg(long)]
    train_samples: Option<usize>,
    #[arg(long)]
    test_samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct Train {
    /// JSON with optional `model` and `train` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    pull_weight: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// `layer_norm` or `batch_norm`.
    #[arg(long)]
    norm_kind: Option<String>,
}

#[derive(Args)]
struct PlanFlags {
    #[arg(long)]
    plan: PathBuf,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Comma-separated `kind:severity` specs.
    #[arg(long, value_delimiter = ',')]
    corruptions: Option<Vec<String>>,
    #[arg(long)]
    pca_k: Option<usize>,
}

#[derive(Args)]
struct Bench {
    #[command(flatten)]
    plan: PlanFlags,
}

#[derive(Args)]
struct Ablate {
    #[command(flatten)]
    plan: PlanFlags,
    /// filter, param_mode, consensus, target_scope or weighting.
    #[arg(long)]
    axis: String,
}

#[derive(Args)]
struct Boards {
    /// Record files (`.jsonl`) or directories of them.
    #[arg(long, required = true, num_args = 1..)]
    records: Vec<PathBuf>,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long)]
    out_dir: PathBuf,
    /// Keep only this many records, stratified by method and corruption.
    #[arg(long)]
    sample: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct Correlate {
    #[arg(long)]
    boards: PathBuf,
    /// CSV with header `sample_id,score`.
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn overrides(pairs: Vec<(&str, Option<Value>)>) -> Vec<(&str, Value)> {
    pairs.into_iter().filter_map(|(k, v)| v.map(|v| (k, v))).collect()
}

fn gen_data(a: GenData) -> Result<()> {
    let spec: SyntheticTaskSpec = layered(
        a.config.as_deref(),
        overrides(vec![
            ("num_classes", a.num_classes.map(|v| json!(v))),
            ("input_dim", a.input_dim.map(|v| json!(v))),
            ("clusters_per_class", a.clusters_per_class.map(|v| json!(v))),
            ("cluster_spread", a.cluster_spread.map(|v| json!(v))),
            ("train_samples", a.train_samples.map(|v| json!(v))),
            ("test_samples", a.test_samples.map(|v| json!(v))),
            ("seed", a.seed.map(|v| json!(v))),
        ]),
    )?;
    let ds = generate_dataset(&spec)?;
    save_dataset(&ds, &a.out)?;
    println!("wrote {} ({} train, {} test)", a.out.display(), ds.train.len(), ds.test.len());
    Ok(())
}

fn train(a: Train) -> Result<()> {
    let mut setup: TrainSetup = layered(
        a.config.as_deref(),
        overrides(vec![
            ("train.epochs", a.epochs.map(|v| json!(v))),
            ("train.lr", a.lr.map(|v| json!(v))),
            ("train.batch_size", a.batch_size.map(|v| json!(v))),
            ("train.pull_weight", a.pull_weight.map(|v| json!(v))),
            ("train.seed", a.seed.map(|v| json!(v))),
            ("model.backbone.norm_kind", a.norm_kind.map(|v| json!(v))),
        ]),
    )?;
    let ds = load_dataset(&a.data).map_err(|e| Error::Config(format!("dataset {}: {e}", a.data.display())))?;
    setup.model.backbone.input_dim = ds.spec.input_dim;
    setup.model.num_classes = ds.spec.num_classes;
    let (model, report) = train_source_model(&ds.train, setup.model, &setup.train)?;
    save_model(&model, &a.out)?;
    let test = evaluate(&model, &ds.test)?;
    println!(
        "wrote {}: train accuracy {:.2}%, clean test accuracy {test:.2}%",
        a.out.display(),
        report.clean_accuracy
    );
    Ok(())
}

fn load_plan(f: PlanFlags) -> Result<BenchmarkPlan> {
    let mut value = read_json(&f.plan)?;
    let extra = overrides(vec![
        ("model", f.model.map(|v| json!(v))),
        ("dataset", f.dataset.map(|v| json!(v))),
        ("output_dir", f.output_dir.map(|v| json!(v))),
        ("seeds", f.seeds.map(|v| json!(v))),
        ("corruptions", f.corruptions.map(|v| json!(v))),
        ("pca_k", f.pca_k.map(|v| json!(v))),
    ]);
    for (k, v) in extra {
        set_path(&mut value, k, v);
    }
    serde_json::from_value(value).map_err(|e| Error::Config(format!("benchmark plan: {e}")))
}

fn bench(a: Bench) -> Result<()> {
    let plan = load_plan(a.plan)?;
    let out = run_benchmark(&plan)?;
    for row in &out.accuracy {
        println!("{:<16} {:>7.2} ± {:.2}", row.method, row.total.mean, row.total.std);
    }
    println!("outputs in {}", plan.output_dir.display());
    Ok(())
}

fn ablate(a: Ablate) -> Result<()> {
    let axis: AblationAxis = a.axis.parse()?;
    let plan = load_plan(a.plan)?;
    for row in run_ablation(&plan, axis)? {
        println!("{:<18} {:<16} {:>7.2} ± {:.2} [{:.2}, {:.2}]", row.setting, row.method, row.mean, row.std, row.min, row.max);
    }
    Ok(())
}

fn record_files(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut inner: Vec<PathBuf> = std::fs::read_dir(p)?
                .map(|e| e.map(|e| e.path()))
                .collect::<std::io::Result<Vec<_>>>()?
                .into_iter()
                .filter(|f| f.extension().is_some_and(|e| e == "jsonl"))
                .collect();
            inner.sort();
            files.extend(inner);
        } else if p.is_file() {
            files.push(p.clone());
        } else {
            return Err(Error::Config(format!("record path {} does not exist", p.display())));
        }
    }
    Ok(files)
}

fn boards(a: Boards) -> Result<()> {
    let model = load_model(&a.model).map_err(|e| Error::Config(format!("model {}: {e}", a.model.display())))?;
    let mut records = Vec::new();
    for f in record_files(&a.records)? {
        records.extend(read_records(&f)?);
    }
    if let Some(n) = a.sample {
        let strata: Vec<String> =
            records.iter().map(|r| format!("{}|{}", r.method, corruption_of(&r.sample_id))).collect();
        let keep = stratified_sample(&strata, n, a.seed);
        records = keep.into_iter().map(|i| records[i].clone()).collect();
    }
    let written = export_boards(&records, &model, a.k, &a.out_dir)?;
    println!("wrote {} boards to {}", written.len(), a.out_dir.display());
    Ok(())
}

fn correlate(a: Correlate) -> Result<()> {
    for row in correlate_scores(&a.boards, &a.scores, &a.out)? {
        println!("{:<16} n={:<5} pearson {:>7.4} spearman {:>7.4}", row.scope, row.n, row.pearson, row.spearman);
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Bench(a) => bench(a),
        Command::Ablate(a) => ablate(a),
        Command::Boards(a) => boards(a),
        Command::Correlate(a) => correlate(a),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(prototta_cli::exit_code(&e));
    }
}

