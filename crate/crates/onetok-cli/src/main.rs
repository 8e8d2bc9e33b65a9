use std::path::PathBuf;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use onetok_cli::bench;
use onetok_cli::reportcmd;
use onetok_cli::runner::{LocalRunner, MetricRunner, RemoteRunner};
use onetok_core::adapter::LoraConfig;
use onetok_core::model::{ModelConfig, ModelWeights};
use onetok_core::template::{parse_spec, validate_spec};
use onetok_core::tokenizer::Vocabulary;
use onetok_core::trainer::{
    generate_toy_dataset, read_dataset, split_by_trace, write_dataset, ToyTask, TrainRunConfig,
    Trainer,
};
use onetok_serve::{Server, ServiceConfig};

#[derive(Parser)]
#[command(name = "onetok", version, about = "Single-token evaluators over a shared frozen backbone: train, serve, benchmark")]
enum Cli {
    /// Create or inspect backbone weight files.
    #[command(subcommand)]
    Model(ModelCmd),
    /// Generate synthetic datasets.
    #[command(subcommand)]
    Dataset(DatasetCmd),
    /// Train a metric adapter against a frozen backbone.
    Train(TrainArgs),
    /// Run the HTTP evaluation service.
    Serve(ServeArgs),
    /// Latency and throughput measurement.
    #[command(subcommand)]
    Bench(BenchCmd),
    /// Quality reports over labeled datasets.
    #[command(subcommand)]
    Report(ReportCmd),
}

#[derive(Subcommand)]
enum ModelCmd {
    /// Write freshly initialized backbone weights to a container file.
    Init(ModelInitArgs),
}

#[derive(Args)]
struct ModelInitArgs {
    /// Output weight file.
    #[arg(long, default_value = "model.bin")]
    out: PathBuf,
    /// Base architecture: desk (vocab 512, d64, 4 layers) or tiny.
    #[arg(long, default_value = "desk")]
    arch: String,
    /// Initialization seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum DatasetCmd {
    /// Generate a labeled toy dataset (line-delimited JSON records).
    Gen(DatasetGenArgs),
}

#[derive(Args)]
struct DatasetGenArgs {
    /// Task kind: marker | corruption-adherence.
    #[arg(long)]
    kind: String,
    /// Number of examples.
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Backbone weight file (stays frozen).
    #[arg(long)]
    model: PathBuf,
    /// Metric spec file.
    #[arg(long)]
    spec: PathBuf,
    /// Training dataset (line-delimited JSON).
    #[arg(long)]
    dataset: PathBuf,
    /// Output adapter file.
    #[arg(long)]
    out: PathBuf,
    /// Optional vocabulary file (bundled toy vocabulary otherwise).
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Hold out this trace fraction for validation.
    #[arg(long, default_value_t = 0.2)]
    val_fraction: f64,
    #[arg(long, default_value_t = 3)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 3e-3)]
    lr: f64,
    #[arg(long, default_value_t = 8)]
    rank: usize,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Write `<prefix>.csv` (per-step loss) and `<prefix>.txt` (summary).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    /// Service config file; flags below override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    listen: Option<String>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    adapters: Option<PathBuf>,
    /// Directory of metric spec files registered at startup.
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    max_concurrent: Option<usize>,
    #[arg(long)]
    max_context: Option<usize>,
}

#[derive(Subcommand)]
enum BenchCmd {
    /// Latency sweep over exact prompt token lengths.
    Latency(BenchLatencyArgs),
    /// Closed-loop throughput against a running service.
    Throughput(BenchThroughputArgs),
}

#[derive(Args)]
struct BenchLatencyArgs {
    /// Comma-separated token lengths, strictly increasing.
    #[arg(long, default_value = "64,128,256,512")]
    lengths: String,
    #[arg(long, default_value_t = 20)]
    repeats: usize,
    #[arg(long, default_value_t = 3)]
    warmup: usize,
    /// In-process mode: weight file to benchmark.
    #[arg(long, conflicts_with = "url")]
    model: Option<PathBuf>,
    /// Remote mode: base URL of a running service.
    #[arg(long, requires = "metric")]
    url: Option<String>,
    /// Registered metric to drive in remote mode.
    #[arg(long)]
    metric: Option<String>,
    /// Remote mode context cap used for validation.
    #[arg(long, default_value_t = 1024)]
    max_context: usize,
    /// CSV output path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchThroughputArgs {
    #[arg(long)]
    url: String,
    #[arg(long)]
    metric: String,
    #[arg(long, default_value_t = 4)]
    concurrency: usize,
    /// Duration in seconds.
    #[arg(long, default_value_t = 10.0)]
    duration: f64,
    /// Input text for the fixed request payload.
    #[arg(long, default_value = "the quick brown fox jumps over the lazy dog")]
    input: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum ReportCmd {
    /// Precision/recall/F1/accuracy and confusion counts.
    Classify(ReportArgs),
    /// ROC curve and trapezoidal AUC for a binary metric.
    Roc(ReportArgs),
}

#[derive(Args)]
struct ReportArgs {
    /// Labeled dataset (line-delimited JSON).
    #[arg(long)]
    dataset: PathBuf,
    /// Remote mode: base URL of a running service.
    #[arg(long, requires = "metric", conflicts_with_all = ["model", "spec", "adapter"])]
    url: Option<String>,
    /// Metric name (remote mode).
    #[arg(long)]
    metric: Option<String>,
    /// In-process mode: backbone weight file.
    #[arg(long, requires_all = ["spec", "adapter"])]
    model: Option<PathBuf>,
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    adapter: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Output path: CSV for roc points / classify summary.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write per-example predictions CSV here.
    #[arg(long)]
    predictions: Option<PathBuf>,
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<(), String> {
    match cli {
        Cli::Model(ModelCmd::Init(args)) => model_init(args),
        Cli::Dataset(DatasetCmd::Gen(args)) => dataset_gen(args),
        Cli::Train(args) => train(args),
        Cli::Serve(args) => serve(args),
        Cli::Bench(BenchCmd::Latency(args)) => bench_latency(args),
        Cli::Bench(BenchCmd::Throughput(args)) => bench_throughput(args),
        Cli::Report(ReportCmd::Classify(args)) => report_classify(args),
        Cli::Report(ReportCmd::Roc(args)) => report_roc(args),
    }
}

fn model_init(args: ModelInitArgs) -> Result<(), String> {
    let mut config = match args.arch.as_str() {
        "desk" => ModelConfig::desk(),
        "tiny" => ModelConfig::tiny(),
        other => return Err(format!("unknown arch {other:?} (expected desk or tiny)")),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let weights = ModelWeights::<f32>::init_random(config).map_err(|e| e.to_string())?;
    weights.save(&args.out).map_err(|e| e.to_string())?;
    println!(
        "wrote {} (vocab {}, d_model {}, {} layers, seed {})",
        args.out.display(),
        config.vocab_size,
        config.d_model,
        config.n_layers,
        config.seed
    );
    Ok(())
}

fn dataset_gen(args: DatasetGenArgs) -> Result<(), String> {
    let kind: ToyTask = args.kind.parse()?;
    let dataset = generate_toy_dataset(kind, args.n, args.seed).map_err(|e| e.to_string())?;
    write_dataset(&args.out, &dataset).map_err(|e| e.to_string())?;
    println!("wrote {} examples to {}", dataset.len(), args.out.display());
    Ok(())
}

fn train(args: TrainArgs) -> Result<(), String> {
    let weights = ModelWeights::<f32>::load(&args.model).map_err(|e| e.to_string())?;
    let vocab = match &args.vocab {
        Some(path) => Vocabulary::load(path).map_err(|e| e.to_string())?,
        None => Vocabulary::toy().clone(),
    };
    let spec_text = std::fs::read_to_string(&args.spec).map_err(|e| e.to_string())?;
    let spec = parse_spec(&spec_text).map_err(|e| e.to_string())?;
    let metric = validate_spec(&spec, &vocab).map_err(|e| e.to_string())?;
    let dataset = read_dataset(&args.dataset).map_err(|e| e.to_string())?;

    let (train_set, val_set) = if args.val_fraction > 0.0 {
        let split =
            split_by_trace(&dataset, args.val_fraction, args.seed).map_err(|e| e.to_string())?;
        for warning in &split.warnings {
            eprintln!("warning: {warning}");
        }
        (split.train, split.test)
    } else {
        (dataset, Vec::new())
    };

    let mut cfg = TrainRunConfig::for_examples_epochs(train_set.len(), args.epochs);
    cfg.batch_size = args.batch;
    cfg.total_steps = train_set.len().div_ceil(args.batch).max(1) * args.epochs;
    cfg.warmup_steps = cfg.total_steps / 10;
    cfg.learning_rate = args.lr;
    cfg.seed = args.seed;
    cfg.lora = LoraConfig {
        rank: args.rank,
        alpha: args.alpha.unwrap_or(args.rank as f64),
        targets: LoraConfig::full().targets,
    };

    let checksum_before = weights.checksum();
    let trainer = Trainer::new(&weights, &vocab);
    println!(
        "training {} on {} examples ({} steps, batch {}, lr {}, rank {})",
        metric.spec.name, train_set.len(), cfg.total_steps, cfg.batch_size, cfg.learning_rate, cfg.lora.rank
    );
    let (adapter, report) = trainer
        .train(&metric, &train_set, Some(val_set.as_slice()).filter(|v| !v.is_empty()), &cfg)
        .map_err(|e| e.to_string())?;
    assert_eq!(weights.checksum(), checksum_before, "backbone must stay frozen");

    adapter.save(&args.out).map_err(|e| e.to_string())?;
    print!("{}", report.summary_text());
    println!("wrote adapter to {}", args.out.display());
    if let Some(prefix) = args.report {
        let csv_path = prefix.with_extension("csv");
        let txt_path = prefix.with_extension("txt");
        std::fs::write(&csv_path, report.loss_csv()).map_err(|e| e.to_string())?;
        std::fs::write(&txt_path, report.summary_text()).map_err(|e| e.to_string())?;
        println!("wrote {} and {}", csv_path.display(), txt_path.display());
    }
    Ok(())
}

fn serve(args: ServeArgs) -> Result<(), String> {
    let mut config = match &args.config {
        Some(path) => ServiceConfig::load(path).map_err(|e| e.to_string())?,
        None => ServiceConfig::default(),
    };
    config.apply_env().map_err(|e| e.to_string())?;
    if let Some(listen) = args.listen {
        config.listen = listen;
    }
    if let Some(model) = args.model {
        config.model = model;
    }
    if let Some(adapters) = args.adapters {
        config.adapters = adapters;
    }
    if let Some(metrics) = args.metrics {
        config.metrics = Some(metrics);
    }
    if let Some(vocab) = args.vocab {
        config.vocab = Some(vocab);
    }
    if let Some(max_concurrent) = args.max_concurrent {
        config.max_concurrent = max_concurrent;
    }
    if let Some(max_context) = args.max_context {
        config.max_context = max_context;
    }

    let server = Server::bind(config).map_err(|e| e.to_string())?;
    let addr = server.local_addr().map_err(|e| e.to_string())?;
    println!("listening on http://{addr}");
    let running = server.start().map_err(|e| e.to_string())?;
    running.wait();
    Ok(())
}

fn parse_lengths(spec: &str) -> Result<Vec<usize>, String> {
    spec.split(',')
        .map(|s| s.trim().parse::<usize>().map_err(|_| format!("bad length {s:?}")))
        .collect()
}

fn bench_latency(args: BenchLatencyArgs) -> Result<(), String> {
    let lengths = parse_lengths(&args.lengths)?;
    let profile = match (&args.model, &args.url) {
        (Some(model), None) => {
            bench::latency_inprocess(model, &lengths, args.repeats, args.warmup)
                .map_err(|e| e.to_string())?
        }
        (None, Some(url)) => bench::latency_remote(
            url,
            args.metric.as_deref().expect("clap requires metric with url"),
            &lengths,
            args.repeats,
            args.warmup,
            args.max_context,
        )
        .map_err(|e| e.to_string())?,
        _ => return Err("pass exactly one of --model or --url".into()),
    };
    print!("{}", profile.summary_text());
    if let Some(out) = args.out {
        std::fs::write(&out, profile.csv()).map_err(|e| e.to_string())?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

fn bench_throughput(args: BenchThroughputArgs) -> Result<(), String> {
    let report = bench::throughput(
        &args.url,
        &args.metric,
        &args.input,
        args.concurrency,
        Duration::from_secs_f64(args.duration),
    )
    .map_err(|e| e.to_string())?;
    print!("{}", report.summary_text());
    if let Some(out) = args.out {
        std::fs::write(&out, report.csv()).map_err(|e| e.to_string())?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

fn build_runner(args: &ReportArgs) -> Result<(MetricRunner, Vec<String>, onetok_core::classmap::ClassKind), String> {
    match (&args.url, &args.model) {
        (Some(url), None) => {
            let metric = args.metric.clone().expect("clap requires metric with url");
            let runner = RemoteRunner::new(url, &metric).map_err(|e| e.to_string())?;
            // fetch classes from the service listing
            let mut client = onetok_serve::HttpClient::new(url).map_err(|e| e.to_string())?;
            let (status, body) = client.get("/v1/metrics").map_err(|e| e.to_string())?;
            if status != 200 {
                return Err(format!("metrics listing returned {status}"));
            }
            let listing: serde_json::Value =
                serde_json::from_slice(&body).map_err(|e| e.to_string())?;
            let entry = listing["metrics"]
                .as_array()
                .and_then(|l| l.iter().find(|m| m["name"] == metric.as_str()))
                .ok_or(format!("metric {metric:?} is not registered on the service"))?;
            let classes: Vec<String> = entry["classes"]
                .as_array()
                .map(|a| a.iter().filter_map(|v| v.as_str().map(String::from)).collect())
                .unwrap_or_default();
            let kind = entry["class_kind"]
                .as_str()
                .unwrap_or("binary")
                .parse()
                .map_err(|e: String| e)?;
            Ok((MetricRunner::Remote(runner), classes, kind))
        }
        (None, Some(model)) => {
            let spec = args.spec.as_ref().expect("clap requires spec with model");
            let adapter = args.adapter.as_ref().expect("clap requires adapter with model");
            let runner = LocalRunner::from_files(model, spec, adapter, args.vocab.as_deref())
                .map_err(|e| e.to_string())?;
            let classes = runner.metric.spec.class_words.clone();
            let kind = runner.metric.spec.class_kind;
            Ok((MetricRunner::Local(runner), classes, kind))
        }
        _ => Err("pass exactly one of --url or --model".into()),
    }
}

fn report_classify(args: ReportArgs) -> Result<(), String> {
    let dataset = read_dataset(&args.dataset).map_err(|e| e.to_string())?;
    let (mut runner, classes, kind) = build_runner(&args)?;
    let scored = reportcmd::score_dataset(&mut runner, &dataset).map_err(|e| e.to_string())?;
    let report = reportcmd::classify_report(&scored, &classes, kind).map_err(|e| e.to_string())?;
    print!("{}", report.summary_text());
    if let Some(out) = args.out {
        std::fs::write(&out, report.csv()).map_err(|e| e.to_string())?;
        println!("wrote {}", out.display());
    }
    if let Some(pred) = args.predictions {
        std::fs::write(&pred, reportcmd::scored_csv(&scored)).map_err(|e| e.to_string())?;
        println!("wrote {}", pred.display());
    }
    Ok(())
}

fn report_roc(args: ReportArgs) -> Result<(), String> {
    let dataset = read_dataset(&args.dataset).map_err(|e| e.to_string())?;
    let (mut runner, classes, kind) = build_runner(&args)?;
    if kind != onetok_core::classmap::ClassKind::Binary {
        return Err("roc reports require a binary metric".into());
    }
    let scored = reportcmd::score_dataset(&mut runner, &dataset).map_err(|e| e.to_string())?;
    let roc = reportcmd::roc_from_scored(&scored, &classes[0]).map_err(|e| e.to_string())?;
    println!("auc: {:.6}  points: {}  thresholds: {}", roc.auc, roc.points.len(), roc.thresholds.len());
    if let Some(out) = args.out {
        std::fs::write(&out, roc.points_csv()).map_err(|e| e.to_string())?;
        println!("wrote {}", out.display());
    }
    Ok(())
}
