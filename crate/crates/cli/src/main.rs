use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use iapas_core::backends::{Backend, RecordingTransport, RemoteTransport};
use iapas_core::datasets::{open_dataset, write_atomic, DatasetManifest};
use iapas_core::metrics::{evaluate_dataset, MetricReport};
use iapas_core::par::configure_workers;
use iapas_core::pipeline::{
    evaluate_predictions, preprocess_category, read_json, run_ablation, segment_category,
    write_json, AblationRow, MetricsStatus, PreprocessResult, ReportFile, RunManifest,
};
use iapas_core::{validate, PipelineConfig, PipelineError};

#[derive(Parser)]
#[command(
    name = "iapas",
    version,
    about = "Zero-shot anomaly segmentation with image-aware prompts"
)]
struct Cli {
    /// Log more (repeat for debug output). RUST_LOG overrides.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Stage 1: build the prompt set and size threshold for a category.
    Preprocess(PreprocessArgs),
    /// Stage 2: score every test image using a saved preprocess result.
    Segment(SegmentArgs),
    /// Pixel AP / F1-max of saved score maps.
    Eval(EvalArgs),
    /// Preprocess, segment and evaluate one category.
    Run(RunArgs),
    /// Run the six component on/off combinations and tabulate them.
    Ablate(RunArgs),
}

#[derive(Args)]
struct BackendArgs {
    /// `replay:DIR` or an http(s) model server URL.
    #[arg(long, env = "IAPAS_BACKEND")]
    backend: Option<String>,
    /// Store every remote response as a replay fixture under DIR.
    #[arg(long, value_name = "DIR")]
    record: Option<PathBuf>,
    /// Stage 2 worker threads (default: number of processors).
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct DatasetArgs {
    /// MVTec-style directory or dataset manifest JSON.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    category: String,
}

#[derive(Args)]
struct ConfigArgs {
    /// Pipeline config JSON; unspecified fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Sampling seed; overrides the config file.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct PreprocessArgs {
    #[command(flatten)]
    data: DatasetArgs,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    backend: BackendArgs,
    /// Writes `<out>/<category>/preprocess.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SegmentArgs {
    #[command(flatten)]
    data: DatasetArgs,
    #[command(flatten)]
    backend: BackendArgs,
    /// Preprocess result (default `<out>/<category>/preprocess.json`).
    #[arg(long)]
    preprocess: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Output directory of a previous `segment` or `run`.
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Evaluate one category; all categories (averaged) when omitted.
    #[arg(long)]
    category: Option<String>,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    data: DatasetArgs,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    backend: BackendArgs,
    #[arg(long)]
    out: PathBuf,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn runtime(stage: &str) -> impl Fn(String) -> Failure + '_ {
    move |msg| Failure::Runtime(format!("{stage}: {msg}"))
}

fn open_backend(args: &BackendArgs) -> Result<Backend, Failure> {
    if let Some(jobs) = args.jobs {
        if jobs == 0 {
            return Err(Failure::Usage("--jobs must be at least 1".into()));
        }
        configure_workers(jobs).map_err(runtime("workers"))?;
    }
    let spec = args
        .backend
        .as_deref()
        .ok_or_else(|| Failure::Usage("no backend: pass --backend or set IAPAS_BACKEND".into()))?;
    if let Some(dir) = spec.strip_prefix("replay:") {
        if args.record.is_some() {
            return Err(Failure::Usage("--record needs a remote backend".into()));
        }
        let backend = Backend::replay(dir).map_err(|e| runtime("backend")(e.to_string()))?;
        log::info!("backend {}", backend.identity());
        return Ok(backend);
    }
    if spec.starts_with("http://") || spec.starts_with("https://") {
        log::info!("backend {spec}");
        let remote = RemoteTransport::new(spec);
        return Ok(match &args.record {
            Some(dir) => Backend::new(RecordingTransport::new(remote, dir)),
            None => Backend::new(remote),
        });
    }
    Err(Failure::Usage(format!(
        "unrecognised backend {spec:?}: expected replay:DIR or http(s)://HOST"
    )))
}

fn load_dataset(path: &Path) -> Result<DatasetManifest, Failure> {
    open_dataset(path).map_err(|e| runtime("dataset")(e.to_string()))
}

fn load_config(args: &ConfigArgs) -> Result<PipelineConfig, Failure> {
    let mut config = match &args.config {
        Some(path) => PipelineConfig::load(path).map_err(|e| runtime("config")(e.to_string()))?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    validate(config).map_err(|e| runtime("config")(e.to_string()))
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

fn print_metrics(category: &str, metrics: &MetricsStatus) {
    match metrics {
        MetricsStatus::Computed { report } => println!(
            "{category}\tAP {}\tF1-max {}",
            pct(report.ap),
            pct(report.f1_max)
        ),
        MetricsStatus::Skipped { reason } => println!("{category}\tmetrics skipped: {reason}"),
    }
}

fn preprocess(args: PreprocessArgs) -> Result<(), Failure> {
    let dataset = load_dataset(&args.data.dataset)?;
    let config = load_config(&args.config)?;
    let backend = open_backend(&args.backend)?;
    let category = dataset
        .category(&args.data.category)
        .map_err(|e| runtime("dataset")(e.to_string()))?;
    let pre = preprocess_category(category, &config, &backend)?;
    write_json(
        &args.out.join(&args.data.category).join("preprocess.json"),
        &pre,
    )?;
    println!("prompts\t{}", pre.prompt_bundle.final_prompts().join(", "));
    println!("size threshold\t{:.6}", pre.size_threshold.value());
    Ok(())
}

fn segment(args: SegmentArgs) -> Result<(), Failure> {
    let dataset = load_dataset(&args.data.dataset)?;
    let backend = open_backend(&args.backend)?;
    let path = args
        .preprocess
        .unwrap_or_else(|| args.out.join(&args.data.category).join("preprocess.json"));
    let pre: PreprocessResult = read_json(&path)?;
    if pre.category != args.data.category {
        return Err(Failure::Usage(format!(
            "{} was made for category {:?}, not {:?}",
            path.display(),
            pre.category,
            args.data.category
        )));
    }
    let config = pre.config_snapshot.clone();
    let manifest = segment_category(
        &dataset,
        &args.data.category,
        &pre,
        &config,
        &backend,
        &args.out,
    )?;
    print_metrics(&manifest.category, &manifest.metrics);
    Ok(())
}

fn eval(args: EvalArgs) -> Result<(), Failure> {
    let dataset = load_dataset(&args.dataset)?;
    let names: Vec<String> = match &args.category {
        Some(c) => vec![c.clone()],
        None => dataset.categories.iter().map(|c| c.name.clone()).collect(),
    };
    let mut reports: Vec<MetricReport> = Vec::new();
    for name in &names {
        match evaluate_predictions(&dataset, name, &args.pred)? {
            Ok(report) => {
                print_metrics(
                    name,
                    &MetricsStatus::Computed {
                        report: report.clone(),
                    },
                );
                reports.push(report);
            }
            Err(reason) => {
                return Err(Failure::Runtime(format!("evaluation: {name}: {reason}")));
            }
        }
    }
    let (category, report) = match args.category.as_deref() {
        Some(c) => (Some(c), reports.remove(0)),
        None => {
            let mean =
                evaluate_dataset(&reports).map_err(|e| runtime("evaluation")(e.to_string()))?;
            print_metrics(
                "mean",
                &MetricsStatus::Computed {
                    report: mean.clone(),
                },
            );
            (None, mean)
        }
    };
    let file = ReportFile::new(
        &dataset.name,
        category,
        &report,
        &config_digest_of(&args.pred, category),
    );
    write_json(&args.report, &file)?;
    Ok(())
}

/// Config digest recorded by the run that produced `pred`, when known.
fn config_digest_of(pred: &Path, category: Option<&str>) -> String {
    category
        .and_then(|c| read_json::<RunManifest>(&pred.join(c).join("manifest.json")).ok())
        .map(|m| m.config_digest)
        .unwrap_or_default()
}

fn run(args: RunArgs) -> Result<(), Failure> {
    let dataset = load_dataset(&args.data.dataset)?;
    let config = load_config(&args.config)?;
    let backend = open_backend(&args.backend)?;
    let name = &args.data.category;
    let category = dataset
        .category(name)
        .map_err(|e| runtime("dataset")(e.to_string()))?;
    let pre = preprocess_category(category, &config, &backend)?;
    write_json(&args.out.join(name).join("preprocess.json"), &pre)?;
    let manifest = segment_category(&dataset, name, &pre, &config, &backend, &args.out)?;
    print_metrics(name, &manifest.metrics);
    Ok(())
}

fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::from("Step1-1\tStep1-3\tStep2-2\tAP\tF1-max\n");
    for row in rows {
        let flags: Vec<String> = row.label.chars().map(String::from).collect();
        let (ap, f1) = match &row.metrics {
            MetricsStatus::Computed { report } => (pct(report.ap), pct(report.f1_max)),
            MetricsStatus::Skipped { .. } => ("n/a".into(), "n/a".into()),
        };
        let _ = writeln!(out, "{}\t{ap}\t{f1}", flags.join("\t"));
    }
    out
}

fn ablate(args: RunArgs) -> Result<(), Failure> {
    let dataset = load_dataset(&args.data.dataset)?;
    let config = load_config(&args.config)?;
    let backend = open_backend(&args.backend)?;
    let rows = run_ablation(&dataset, &args.data.category, &config, &backend, &args.out)?;
    let table = ablation_table(&rows);
    write_json(&args.out.join("ablation.json"), &rows)?;
    write_atomic(&args.out.join("ablation.tsv"), table.as_bytes())
        .map_err(|e| runtime("output")(e.to_string()))?;
    print!("{table}");
    Ok(())
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    init_logging(cli.verbose);
    let result = match cli.command {
        Command::Preprocess(a) => preprocess(a),
        Command::Segment(a) => segment(a),
        Command::Eval(a) => eval(a),
        Command::Run(a) => run(a),
        Command::Ablate(a) => ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
