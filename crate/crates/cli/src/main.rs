//! `proxyslice`: sample proxy datasets, search cells on them, evaluate and
//! analyze the results.

mod grid;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use proxyslice::analysis::{self, TimingMetric};
use proxyslice::data::{read_proxy, write_proxy, Method, SampleSource};
use proxyslice::eval::{evaluate_cell, EvalConfig};
use proxyslice::nn::Genotype;
use proxyslice::pipeline::{
    self, load_dataset, Classify, DatasetConfig, DatasetKind, FailureKind, PipelineError, RunConfig, SamplingConfig,
    Splits, Stage, DATA_DIR_ENV,
};
use proxyslice::scorers;
use proxyslice::search::{self, read_search_log, write_search_log, Algorithm, SearchConfig};

#[derive(Parser)]
#[command(
    name = "proxyslice",
    version,
    about = "Proxy-dataset sampling for cell-based architecture search"
)]
struct Cli {
    /// Seed for sampling and search.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory holding the CIFAR binaries. Falls back to $PROXYSLICE_DATA_DIR.
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    /// Log more (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Select a proxy subset of the training split.
    Sample(SampleArgs),
    /// Write per-sample reconstruction scores.
    Score(ScoreArgs),
    /// Search a cell on a proxy.
    Search(SearchArgs),
    /// Train a genotype from scratch and report accuracy.
    Eval(EvalArgs),
    /// Aggregate search logs into edge distributions or timing curves.
    Analyze(AnalyzeArgs),
    /// Run sample, search, eval and analyze in one go.
    Pipeline(PipelineArgs),
    /// Run a grid of pipelines as independent processes.
    Grid(grid::GridArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum DatasetArg {
    Patterns,
    Blobs,
    Cifar10,
    Cifar100,
}

/// Which dataset to load; unset fields keep the pipeline defaults.
#[derive(Args)]
struct DatasetArgs {
    #[arg(long, value_enum, default_value = "patterns")]
    dataset: DatasetArg,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    test_per_class: Option<usize>,
    /// Image side of the pattern task.
    #[arg(long)]
    side: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    /// Dimension of the blob task.
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    spread: Option<f64>,
    /// Average-pool factor for CIFAR images.
    #[arg(long)]
    downsample: Option<usize>,
    #[arg(long)]
    limit_per_class: Option<usize>,
    /// Seed of the synthetic generators.
    #[arg(long, default_value_t = 0)]
    dataset_seed: u64,
}

impl DatasetArgs {
    fn config(&self) -> DatasetConfig {
        let d = DatasetConfig::default();
        DatasetConfig {
            kind: match self.dataset {
                DatasetArg::Patterns => DatasetKind::Patterns,
                DatasetArg::Blobs => DatasetKind::Blobs,
                DatasetArg::Cifar10 => DatasetKind::Cifar10,
                DatasetArg::Cifar100 => DatasetKind::Cifar100,
            },
            seed: self.dataset_seed,
            classes: self.classes.unwrap_or(d.classes),
            per_class: self.per_class.unwrap_or(d.per_class),
            test_per_class: self.test_per_class.unwrap_or(d.test_per_class),
            side: self.side.unwrap_or(d.side),
            noise: self.noise.unwrap_or(d.noise),
            dim: self.dim.unwrap_or(d.dim),
            spread: self.spread.unwrap_or(d.spread),
            downsample: self.downsample.unwrap_or(d.downsample),
            limit_per_class: self.limit_per_class.or(d.limit_per_class),
        }
    }

    fn load(&self, data_dir: Option<&Path>) -> Result<Splits> {
        let cfg = RunConfig {
            data_dir: data_dir.map(Path::to_path_buf),
            dataset: self.config(),
            ..RunConfig::default()
        };
        Ok(load_dataset(&cfg)?)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum DirectionArg {
    Lowest,
    Highest,
}

#[derive(Args)]
struct SampleArgs {
    #[command(flatten)]
    data: DatasetArgs,
    /// One of rs, cc-rs, km-or, cc-or, ae, ae-max, tl, tl-max, full.
    #[arg(long)]
    method: String,
    #[arg(long)]
    ratio: f64,
    /// Cluster count for km-or (default: number of classes).
    #[arg(long)]
    k: Option<usize>,
    /// Keep the lowest or highest scores (ae and tl only).
    #[arg(long, value_enum)]
    direction: Option<DirectionArg>,
    /// Classifier-loss CSV for tl.
    #[arg(long)]
    scores: Option<PathBuf>,
    /// Autoencoder rank for ae.
    #[arg(long, default_value_t = scorers::DEFAULT_RANK)]
    rank: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScoreMethod {
    Ae,
}

#[derive(Args)]
struct ScoreArgs {
    #[command(flatten)]
    data: DatasetArgs,
    #[arg(long, value_enum, default_value = "ae")]
    method: ScoreMethod,
    #[arg(long, default_value_t = scorers::DEFAULT_RANK)]
    rank: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SearchArgs {
    #[command(flatten)]
    data: DatasetArgs,
    /// darts1, gdas or random; overrides the config file.
    #[arg(long)]
    algo: Option<String>,
    #[arg(long)]
    proxy: PathBuf,
    /// TOML with search settings, bare or under `[search]`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    log: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DatasetArgs,
    #[arg(long)]
    genotype: String,
    #[arg(long, value_delimiter = ',', default_values_t = [4usize, 8, 16])]
    widths: Vec<usize>,
    /// Number of weight-initialization seeds, starting at 0.
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    cells: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Report JSON; a Markdown table is written next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum What {
    Edges,
    Timing,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Total,
    PerEpoch,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Glob of search logs; may be repeated.
    #[arg(long, required = true)]
    logs: Vec<String>,
    #[arg(long, value_enum)]
    what: What,
    #[arg(long, value_enum, default_value = "total")]
    metric: MetricArg,
    #[arg(long)]
    out_svg: Option<PathBuf>,
    /// Without `--out-svg` or `--out-csv` the CSV goes to stdout.
    #[arg(long)]
    out_csv: Option<PathBuf>,
}

#[derive(Args)]
struct PipelineArgs {
    /// TOML run configuration.
    #[arg(long, conflicts_with = "manifest")]
    config: Option<PathBuf>,
    /// JSON object merged into the configuration; may be repeated.
    #[arg(long = "set")]
    overrides: Vec<String>,
    /// Re-run the configuration recorded in this manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output directory (overrides the configuration).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    let code = e
        .chain()
        .find_map(|c| c.downcast_ref::<PipelineError>())
        .map_or(1, PipelineError::exit_code);
    code as u8
}

fn usage(stage: Stage, msg: impl Into<String>) -> PipelineError {
    PipelineError::new(stage, FailureKind::Usage, msg)
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    let data_dir = cli.data_dir.as_deref();
    match cli.command {
        Command::Sample(a) => sample(a, seed.unwrap_or(0), data_dir),
        Command::Score(a) => score(a, seed.unwrap_or(0), data_dir),
        Command::Search(a) => search_cmd(a, seed, data_dir),
        Command::Eval(a) => eval(a, data_dir),
        Command::Analyze(a) => analyze(a),
        Command::Pipeline(a) => pipeline_cmd(a, seed, data_dir),
        Command::Grid(a) => grid::run(a, seed, data_dir),
    }
}

fn resolve_method(name: &str, direction: Option<DirectionArg>) -> Result<Method> {
    let method: Method = name
        .parse()
        .map_err(|e: proxyslice::data::DataError| e.at(Stage::Sample))?;
    let Some(dir) = direction else {
        return Ok(method);
    };
    let resolved = match (method, dir) {
        (Method::Autoencoder | Method::AutoencoderHardest, DirectionArg::Lowest) => Method::Autoencoder,
        (Method::Autoencoder | Method::AutoencoderHardest, DirectionArg::Highest) => Method::AutoencoderHardest,
        (Method::Transfer | Method::TransferHardest, DirectionArg::Lowest) => Method::Transfer,
        (Method::Transfer | Method::TransferHardest, DirectionArg::Highest) => Method::TransferHardest,
        _ => bail!(usage(
            Stage::Sample,
            format!("--direction applies to ae and tl, not {method}")
        )),
    };
    if resolved != method && matches!(method, Method::AutoencoderHardest | Method::TransferHardest) {
        bail!(usage(
            Stage::Sample,
            format!("--direction lowest contradicts method {method}")
        ));
    }
    Ok(resolved)
}

fn sample(a: SampleArgs, seed: u64, data_dir: Option<&Path>) -> Result<()> {
    let method = resolve_method(&a.method, a.direction)?;
    let splits = a.data.load(data_dir)?;
    let cfg = SamplingConfig {
        method,
        ratio: a.ratio,
        k: a.k,
        rank: a.rank,
        scores: a.scores,
    };
    let proxy = pipeline::sample_proxy(&splits.train, &cfg, seed)?;
    write_proxy(&a.out, &proxy).map_err(|e| e.at(Stage::Sample))?;
    println!(
        "{} of {} samples ({method}) -> {}",
        proxy.len(),
        splits.train.len(),
        a.out.display()
    );
    Ok(())
}

fn score(a: ScoreArgs, seed: u64, data_dir: Option<&Path>) -> Result<()> {
    let ScoreMethod::Ae = a.method;
    let splits = a.data.load(data_dir)?;
    let ds = &splits.train;
    let rank = a.rank.min(ds.shape().len());
    let scorer = scorers::fit_reconstruction(ds, rank, seed).map_err(|e| e.at(Stage::Sample))?;
    let scores = scorers::score(&scorer, ds).map_err(|e| e.at(Stage::Sample))?;
    scorers::write_scores(&a.out, &scores).map_err(|e| e.at(Stage::Sample))?;
    println!("{} scores (rank {rank}) -> {}", ds.len(), a.out.display());
    Ok(())
}

fn search_cmd(a: SearchArgs, seed: Option<u64>, data_dir: Option<&Path>) -> Result<()> {
    let mut cfg = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            pipeline::parse_search_config(&text)?
        }
        None => SearchConfig::default(),
    };
    if let Some(algo) = &a.algo {
        cfg.algorithm = algo.parse::<Algorithm>().map_err(|e| e.at(Stage::Config))?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(|e| e.at(Stage::Config))?;
    let splits = a.data.load(data_dir)?;
    let proxy = read_proxy(&a.proxy, Some(&splits.train)).map_err(|e| e.at(Stage::Search))?;
    let outcome = search::run_search(&splits.train, &proxy, &cfg).map_err(|e| e.at(Stage::Search))?;
    write_search_log(&a.log, &outcome.log).map_err(|e| e.at(Stage::Search))?;
    println!("{}", outcome.genotype);
    Ok(())
}

fn eval(a: EvalArgs, data_dir: Option<&Path>) -> Result<()> {
    let genotype: Genotype = a
        .genotype
        .parse()
        .map_err(|e: proxyslice::nn::NnError| e.at(Stage::Eval))?;
    let mut cfg = EvalConfig::default();
    if let Some(v) = a.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = a.cells {
        cfg.cells = v;
    }
    if let Some(v) = a.lr {
        cfg.train.lr = v;
    }
    if let Some(v) = a.batch_size {
        cfg.train.batch_size = v;
    }
    let seeds: Vec<u64> = (0..a.seeds).collect();
    let splits = a.data.load(data_dir)?;
    let report = evaluate_cell(
        &genotype,
        &splits.train,
        &splits.test,
        splits.train.name(),
        &a.widths,
        &seeds,
        &cfg,
    )
    .map_err(|e| e.at(Stage::Eval))?;
    report.write(&a.out).map_err(|e| e.at(Stage::Eval))?;
    print!("{}", report.to_markdown());
    Ok(())
}

fn analyze(a: AnalyzeArgs) -> Result<()> {
    let mut paths = Vec::new();
    for pattern in &a.logs {
        let matches = glob::glob(pattern).map_err(|e| usage(Stage::Analyze, format!("bad glob `{pattern}`: {e}")))?;
        for m in matches {
            paths.push(m.context("listing logs")?);
        }
    }
    paths.sort();
    paths.dedup();
    if paths.is_empty() {
        bail!(usage(Stage::Analyze, format!("no logs match {:?}", a.logs)));
    }
    let logs = paths
        .iter()
        .map(|p| {
            read_search_log(p)
                .map_err(|e| e.at(Stage::Analyze))
                .with_context(|| p.display().to_string())
        })
        .collect::<Result<Vec<_>>>()?;
    let at = |e: analysis::AnalysisError| e.at(Stage::Analyze);
    let (svg, csv) = match a.what {
        What::Edges => {
            let dists = analysis::edge_distributions_by_key(&logs).map_err(at)?;
            (
                analysis::distribution_svg(&dists, None),
                analysis::distribution_csv(&dists).map_err(at)?,
            )
        }
        What::Timing => {
            let metric = match a.metric {
                MetricArg::Total => TimingMetric::Total,
                MetricArg::PerEpoch => TimingMetric::PerEpoch,
            };
            let curve = analysis::timing_curve(&logs, metric).map_err(at)?;
            (
                analysis::timing_svg(&curve, None),
                analysis::timing_csv(&curve).map_err(at)?,
            )
        }
    };
    let write = |path: &Path, body: &str| -> Result<()> {
        std::fs::write(path, body)
            .map_err(|e| e.at(Stage::Analyze))
            .with_context(|| path.display().to_string())
    };
    if let Some(p) = &a.out_svg {
        write(p, &svg)?;
    }
    if let Some(p) = &a.out_csv {
        write(p, &csv)?;
    }
    if a.out_svg.is_none() && a.out_csv.is_none() {
        print!("{csv}");
    } else {
        eprintln!("analyzed {} logs", logs.len());
    }
    Ok(())
}

fn pipeline_cmd(a: PipelineArgs, seed: Option<u64>, data_dir: Option<&Path>) -> Result<()> {
    let mut cfg = match (&a.manifest, &a.config) {
        (Some(m), _) => {
            if !a.overrides.is_empty() || seed.is_some() {
                bail!(usage(Stage::Config, "a manifest re-run takes no --set or --seed"));
            }
            pipeline::Manifest::read(m)?.config
        }
        (None, Some(path)) => pipeline::load_run_config(path, &a.overrides)?,
        (None, None) => pipeline::parse_run_config("", &a.overrides)?,
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(dir) = data_dir {
        cfg.data_dir = Some(dir.to_path_buf());
    }
    if let Some(out) = a.out {
        cfg.output_dir = out;
    }
    if matches!(cfg.dataset.kind, DatasetKind::Cifar10 | DatasetKind::Cifar100) && cfg.resolved_data_dir().is_none() {
        bail!(usage(
            Stage::Dataset,
            format!("CIFAR needs --data-dir or {DATA_DIR_ENV}")
        ));
    }
    let out = pipeline::run_pipeline(&cfg)?;
    let genotype = out.manifest.genotype.map(|g| g.to_string()).unwrap_or_default();
    println!("{genotype}");
    eprintln!("artifacts in {}", out.output_dir.display());
    Ok(())
}
