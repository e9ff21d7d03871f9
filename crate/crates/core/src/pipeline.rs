//! The full experiment loop: sample a proxy, search a cell on it, retrain the
//! cell on the full data and analyze the result. Every artifact records the
//! digest of its inputs, and `manifest.json` ties the run together.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::analysis::{self, GroupKey, TimingMetric};
use crate::data::{
    load_cifar_dir, sha256_hex, synth_blobs, synth_patterns, CifarFormat, CifarSplit, DataError, ImageShape,
    LabeledDataset, Method, ProxyIndex, SampleSource,
};
use crate::eval::{evaluate_cell, EvalConfig, EvalError, EvalReport, DEFAULT_SEEDS, DEFAULT_WIDTHS};
use crate::nn::{Genotype, NnError, TrainConfig};
use crate::sampling::{self, MethodInputs, SamplingError};
use crate::scorers::{self, ScorerError};
use crate::search::{detect_degenerate, run_search, DegenerateReport, SearchConfig, SearchError};

/// Environment variable consulted when no data directory is configured.
pub const DATA_DIR_ENV: &str = "PROXYSLICE_DATA_DIR";

pub const PROXY_FILE: &str = "proxy.json";
pub const SEARCH_LOG_FILE: &str = "search.jsonl";
pub const EVAL_FILE: &str = "eval.json";
pub const ANALYSIS_FILE: &str = "analysis.json";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    /// Stencil images whose classes no parameter-free cell can separate.
    Patterns,
    /// Gaussian clusters as `1 x dim` images.
    Blobs,
    Cifar10,
    Cifar100,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Seed of the synthetic generators (independent of the run seed).
    pub seed: u64,
    pub classes: usize,
    pub per_class: usize,
    pub test_per_class: usize,
    pub side: usize,
    pub noise: f64,
    pub dim: usize,
    pub spread: f64,
    /// Spatial average-pool factor applied to CIFAR images.
    pub downsample: usize,
    /// Keep only the first samples of each CIFAR class.
    pub limit_per_class: Option<usize>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Patterns,
            seed: 0,
            classes: 4,
            per_class: 64,
            test_per_class: 32,
            side: 8,
            noise: 0.0,
            dim: 16,
            spread: 0.1,
            downsample: 4,
            limit_per_class: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub method: Method,
    pub ratio: f64,
    /// Cluster count for `km-or`.
    pub k: Option<usize>,
    /// Autoencoder rank, capped at the sample dimension.
    pub rank: usize,
    /// Classifier-loss CSV for `tl` and `tl-max`.
    pub scores: Option<PathBuf>,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            method: Method::ClassOutlier,
            ratio: 0.5,
            k: None,
            rank: scorers::DEFAULT_RANK,
            scores: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub widths: Vec<usize>,
    pub seeds: Vec<u64>,
    pub cells: usize,
    pub train: TrainConfig,
    pub eval_chunk: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        let base = EvalConfig::default();
        Self {
            widths: DEFAULT_WIDTHS.to_vec(),
            seeds: DEFAULT_SEEDS.to_vec(),
            cells: base.cells,
            train: base.train,
            eval_chunk: base.eval_chunk,
        }
    }
}

impl EvalSection {
    pub fn config(&self) -> EvalConfig {
        EvalConfig {
            cells: self.cells,
            train: self.train,
            eval_chunk: self.eval_chunk,
        }
    }
}

/// Everything one pipeline run needs. The global `seed` drives sampling and
/// search; evaluation uses its own weight-initialization seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data_dir: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub sampling: SamplingConfig,
    pub search: SearchConfig,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("run"),
            data_dir: None,
            dataset: DatasetConfig::default(),
            sampling: SamplingConfig::default(),
            search: SearchConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

/// Pipeline stage, used to prefix errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Config,
    Dataset,
    Sample,
    Search,
    Eval,
    Analyze,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Config => "config",
            Stage::Dataset => "dataset",
            Stage::Sample => "sample",
            Stage::Search => "search",
            Stage::Eval => "eval",
            Stage::Analyze => "analyze",
        };
        f.write_str(s)
    }
}

/// Failure class, which fixes the process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureKind {
    Usage,
    Data,
    Numeric,
    Io,
}

impl FailureKind {
    pub fn exit_code(self) -> i32 {
        match self {
            FailureKind::Usage => 2,
            FailureKind::Data => 3,
            FailureKind::Numeric => 4,
            FailureKind::Io => 1,
        }
    }
}

#[derive(Debug, Error)]
#[error("{stage}: {message}")]
pub struct PipelineError {
    pub stage: Stage,
    pub kind: FailureKind,
    pub message: String,
}

impl PipelineError {
    pub fn new(stage: Stage, kind: FailureKind, message: impl Into<String>) -> Self {
        Self {
            stage,
            kind,
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.kind.exit_code()
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// Maps a library error to its failure class.
pub trait Classify: fmt::Display {
    fn kind(&self) -> FailureKind;

    fn at(&self, stage: Stage) -> PipelineError {
        PipelineError::new(stage, self.kind(), self.to_string())
    }
}

impl Classify for DataError {
    fn kind(&self) -> FailureKind {
        match self {
            DataError::Argument(_) => FailureKind::Usage,
            _ => FailureKind::Data,
        }
    }
}

impl Classify for NnError {
    fn kind(&self) -> FailureKind {
        match self {
            NnError::NonFinite(_) => FailureKind::Numeric,
            NnError::Io(_) => FailureKind::Io,
            NnError::Checkpoint { .. } => FailureKind::Data,
            _ => FailureKind::Usage,
        }
    }
}

impl Classify for SamplingError {
    fn kind(&self) -> FailureKind {
        match self {
            SamplingError::Argument(_) => FailureKind::Usage,
            SamplingError::NonFiniteScore { .. } => FailureKind::Numeric,
            SamplingError::Data(e) => e.kind(),
        }
    }
}

impl Classify for ScorerError {
    fn kind(&self) -> FailureKind {
        match self {
            ScorerError::Argument(_) | ScorerError::Dimension { .. } => FailureKind::Usage,
            ScorerError::NonFinite { .. } => FailureKind::Numeric,
            ScorerError::Sampling(e) => e.kind(),
            _ => FailureKind::Data,
        }
    }
}

impl Classify for SearchError {
    fn kind(&self) -> FailureKind {
        match self {
            SearchError::Config(_) => FailureKind::Usage,
            SearchError::NonFinite { .. } => FailureKind::Numeric,
            SearchError::Nn(e) => e.kind(),
            SearchError::Data(e) => e.kind(),
            SearchError::Log(_) => FailureKind::Data,
            SearchError::Io(_) => FailureKind::Io,
        }
    }
}

impl Classify for EvalError {
    fn kind(&self) -> FailureKind {
        match self {
            EvalError::Config(_) | EvalError::WidthMismatch { .. } => FailureKind::Usage,
            EvalError::Nn(e) => e.kind(),
            EvalError::Json(_) => FailureKind::Data,
            EvalError::Io(_) => FailureKind::Io,
        }
    }
}

impl Classify for analysis::AnalysisError {
    fn kind(&self) -> FailureKind {
        match self {
            analysis::AnalysisError::Empty(_) | analysis::AnalysisError::MissingProvenance { .. } => FailureKind::Usage,
            analysis::AnalysisError::Csv { .. } => FailureKind::Data,
            _ => FailureKind::Io,
        }
    }
}

impl Classify for std::io::Error {
    fn kind(&self) -> FailureKind {
        FailureKind::Io
    }
}

/// Recursively merges `patch` into `base`: objects merge key by key, every
/// other value replaces.
pub fn merge_json(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn usage(e: impl fmt::Display) -> PipelineError {
    PipelineError::new(Stage::Config, FailureKind::Usage, e.to_string())
}

/// Parses a TOML config and applies JSON overrides in order.
pub fn parse_run_config(toml_text: &str, overrides: &[String]) -> Result<RunConfig> {
    let table: toml::Table = toml::from_str(toml_text).map_err(usage)?;
    let mut value = serde_json::to_value(table).map_err(usage)?;
    for o in overrides {
        let patch: Value = serde_json::from_str(o).map_err(|e| usage(format!("override `{o}`: {e}")))?;
        merge_json(&mut value, patch);
    }
    let cfg: RunConfig = serde_json::from_value(value).map_err(usage)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_run_config(path: &Path, overrides: &[String]) -> Result<RunConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| PipelineError::new(Stage::Config, FailureKind::Usage, format!("{}: {e}", path.display())))?;
    parse_run_config(&text, overrides)
}

/// Parses search settings from TOML: either a `[search]` table, as in a run
/// config, or the keys at top level. Other top-level tables are ignored only
/// in the first form.
pub fn parse_search_config(toml_text: &str) -> Result<SearchConfig> {
    let mut table: toml::Table = toml::from_str(toml_text).map_err(usage)?;
    let section = match table.remove("search") {
        Some(toml::Value::Table(t)) => t,
        Some(other) => return Err(usage(format!("`search` must be a table, got {}", other.type_str()))),
        None => table,
    };
    let value = serde_json::to_value(section).map_err(usage)?;
    let cfg: SearchConfig = serde_json::from_value(value).map_err(usage)?;
    cfg.validate().map_err(|e| e.at(Stage::Config))?;
    Ok(cfg)
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let r = self.sampling.ratio;
        if !(r > 0.0 && r <= 1.0) {
            return Err(usage(format!("sampling.ratio must lie in (0, 1], got {r}")));
        }
        self.search.validate().map_err(|e| e.at(Stage::Config))?;
        if self.eval.widths.is_empty() || self.eval.seeds.is_empty() {
            return Err(usage("eval.widths and eval.seeds must be non-empty"));
        }
        Ok(())
    }

    /// The configured data directory, falling back to [`DATA_DIR_ENV`].
    pub fn resolved_data_dir(&self) -> Option<PathBuf> {
        self.data_dir
            .clone()
            .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
    }
}

/// Training and held-out splits.
pub struct Splits {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

fn first_per_class(ds: LabeledDataset, limit: Option<usize>) -> std::result::Result<LabeledDataset, DataError> {
    match limit {
        None => Ok(ds),
        Some(k) => {
            let mut keep: Vec<usize> = ds
                .class_index()
                .iter()
                .flat_map(|m| m.iter().take(k).copied())
                .collect();
            keep.sort_unstable();
            ds.subset(&keep)
        }
    }
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Splits> {
    let d = &cfg.dataset;
    let err = |e: DataError| e.at(Stage::Dataset);
    let test_seed = d.seed ^ 0x7E57_7E57;
    let (train, test) = match d.kind {
        DatasetKind::Patterns => (
            synth_patterns(d.classes, d.per_class, d.side, d.noise, d.seed).map_err(err)?,
            synth_patterns(d.classes, d.test_per_class, d.side, d.noise, test_seed).map_err(err)?,
        ),
        DatasetKind::Blobs => {
            // the class means depend on the seed, so draw both splits together
            let all = synth_blobs(d.classes, d.per_class + d.test_per_class, d.dim, d.spread, d.seed).map_err(err)?;
            let split = d.classes * d.per_class;
            let train: Vec<usize> = (0..split).collect();
            let test: Vec<usize> = (split..all.len()).collect();
            (all.subset(&train).map_err(err)?, all.subset(&test).map_err(err)?)
        }
        DatasetKind::Cifar10 | DatasetKind::Cifar100 => {
            let format = if d.kind == DatasetKind::Cifar10 {
                CifarFormat::Cifar10
            } else {
                CifarFormat::Cifar100
            };
            let dir = cfg.resolved_data_dir().ok_or_else(|| {
                PipelineError::new(
                    Stage::Dataset,
                    FailureKind::Usage,
                    format!("no data directory: pass --data-dir or set {DATA_DIR_ENV}"),
                )
            })?;
            let load = |split| -> std::result::Result<LabeledDataset, DataError> {
                let ds = load_cifar_dir(&dir, format, split)?;
                first_per_class(ds, d.limit_per_class)?.downsample(d.downsample)
            };
            (
                load(CifarSplit::Train).map_err(err)?,
                load(CifarSplit::Test).map_err(err)?,
            )
        }
    };
    Ok(Splits { train, test })
}

/// Runs one sampling method on `ds` as configured.
pub fn sample_proxy(ds: &LabeledDataset, cfg: &SamplingConfig, seed: u64) -> Result<ProxyIndex> {
    let at = |e: &dyn Classify| e.at(Stage::Sample);
    let scores = match cfg.method {
        Method::Autoencoder | Method::AutoencoderHardest => {
            let rank = cfg.rank.min(ds.shape().len()).max(1);
            let scorer = scorers::fit_reconstruction(ds, rank, seed).map_err(|e| at(&e))?;
            Some(scorers::score(&scorer, ds).map_err(|e| at(&e))?)
        }
        Method::Transfer | Method::TransferHardest => {
            let path = cfg.scores.as_ref().ok_or_else(|| {
                PipelineError::new(
                    Stage::Sample,
                    FailureKind::Usage,
                    format!("method {} needs sampling.scores", cfg.method),
                )
            })?;
            Some(scorers::load_scores(path, ds).map_err(|e| at(&e))?)
        }
        _ => None,
    };
    let inputs = MethodInputs {
        k: cfg.k,
        scores: scores.as_ref(),
    };
    sampling::sample(ds, cfg.method, cfg.ratio, seed, inputs).map_err(|e| at(&e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub stage: Stage,
    /// Relative to the output directory.
    pub path: String,
    pub sha256: String,
    /// Digest of the artifact this one was derived from.
    pub parent: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub name: String,
    pub source_hash: String,
    pub train_samples: usize,
    pub test_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub config: RunConfig,
    pub dataset: Option<DatasetInfo>,
    pub artifacts: Vec<ArtifactEntry>,
    pub genotype: Option<Genotype>,
    /// `ok`, or the error that stopped the run.
    pub status: String,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| PipelineError::new(Stage::Config, FailureKind::Usage, format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
    }

    pub fn artifact(&self, stage: Stage) -> Option<&ArtifactEntry> {
        self.artifacts.iter().find(|a| a.stage == stage)
    }
}

/// Summary written by the analysis stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSummary {
    pub genotype: Genotype,
    pub degenerate: DegenerateReport,
    pub cell_params: usize,
    pub edge_distribution: analysis::EdgeDistribution,
    pub timing: analysis::TimingCurve,
    pub lineage: BTreeMap<String, String>,
}

/// Paths and digests of a finished run.
#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub manifest: Manifest,
    pub output_dir: PathBuf,
}

struct Recorder<'a> {
    dir: &'a Path,
    manifest: Manifest,
}

impl Recorder<'_> {
    fn write(&mut self, stage: Stage, name: &str, bytes: &[u8], parent: Option<&str>) -> Result<String> {
        let path = self.dir.join(name);
        fs::write(&path, bytes)
            .map_err(|e| PipelineError::new(stage, FailureKind::Io, format!("{}: {e}", path.display())))?;
        let sha256 = sha256_hex(bytes);
        self.manifest.artifacts.push(ArtifactEntry {
            stage,
            path: name.to_string(),
            sha256: sha256.clone(),
            parent: parent.map(str::to_string),
        });
        Ok(sha256)
    }

    fn flush(&self) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        let path = self.dir.join(MANIFEST_FILE);
        fs::write(&path, text)
            .map_err(|e| PipelineError::new(Stage::Config, FailureKind::Io, format!("{}: {e}", path.display())))
    }
}

/// Runs every stage, writing artifacts and `manifest.json` into
/// `cfg.output_dir`. On failure the manifest records the error and the
/// artifacts written so far are kept.
pub fn run_pipeline(cfg: &RunConfig) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir)
        .map_err(|e| PipelineError::new(Stage::Config, FailureKind::Io, format!("{}: {e}", dir.display())))?;
    let mut rec = Recorder {
        dir: &dir,
        manifest: Manifest {
            tool: "proxyslice".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config: cfg.clone(),
            dataset: None,
            artifacts: Vec::new(),
            genotype: None,
            status: "running".into(),
        },
    };
    let result = stages(cfg, &mut rec);
    rec.manifest.status = match &result {
        Ok(()) => "ok".into(),
        Err(e) => format!("failed: {e}"),
    };
    rec.flush()?;
    result.map(|()| PipelineOutcome {
        manifest: rec.manifest,
        output_dir: dir.clone(),
    })
}

fn stages(cfg: &RunConfig, rec: &mut Recorder<'_>) -> Result<()> {
    let splits = load_dataset(cfg)?;
    let source_hash = splits.train.source_hash();
    log::info!(
        "dataset {}: {} train, {} test samples",
        splits.train.name(),
        splits.train.len(),
        splits.test.len()
    );
    rec.manifest.dataset = Some(DatasetInfo {
        name: splits.train.name().to_string(),
        source_hash: source_hash.clone(),
        train_samples: splits.train.len(),
        test_samples: splits.test.len(),
    });

    let proxy = sample_proxy(&splits.train, &cfg.sampling, cfg.seed)?;
    log::info!(
        "proxy: {} of {} samples ({})",
        proxy.len(),
        splits.train.len(),
        proxy.method()
    );
    let proxy_text = proxy.to_file_string();
    let proxy_hash = rec.write(Stage::Sample, PROXY_FILE, proxy_text.as_bytes(), Some(&source_hash))?;

    let search_cfg = SearchConfig {
        seed: cfg.seed,
        ..cfg.search
    };
    let outcome = run_search(&splits.train, &proxy, &search_cfg).map_err(|e| e.at(Stage::Search))?;
    rec.manifest.genotype = Some(outcome.genotype);
    log::info!("searched genotype {}", outcome.genotype);
    let log_text = outcome.log.to_jsonl().map_err(|e| e.at(Stage::Search))?;
    let log_hash = rec.write(Stage::Search, SEARCH_LOG_FILE, log_text.as_bytes(), Some(&proxy_hash))?;

    let mut report = evaluate_cell(
        &outcome.genotype,
        &splits.train,
        &splits.test,
        splits.train.name(),
        &cfg.eval.widths,
        &cfg.eval.seeds,
        &cfg.eval.config(),
    )
    .map_err(|e| e.at(Stage::Eval))?;
    report.lineage = BTreeMap::from([
        ("source_hash".to_string(), source_hash.clone()),
        ("proxy".to_string(), proxy_hash.clone()),
        ("search_log".to_string(), log_hash.clone()),
    ]);
    let report_json = report.to_json().map_err(|e| e.at(Stage::Eval))?;
    let eval_hash = rec.write(Stage::Eval, EVAL_FILE, report_json.as_bytes(), Some(&log_hash))?;
    rec.write(
        Stage::Eval,
        "eval.md",
        report.to_markdown().as_bytes(),
        Some(&eval_hash),
    )?;
    if report.widths.iter().all(|w| w.successful == 0) {
        return Err(PipelineError::new(
            Stage::Eval,
            FailureKind::Numeric,
            "every evaluation run diverged",
        ));
    }

    analyze(cfg, splits.train.shape(), rec, &outcome.log, &report, &eval_hash)?;
    Ok(())
}

fn analyze(
    cfg: &RunConfig,
    input: ImageShape,
    rec: &mut Recorder<'_>,
    log: &crate::search::SearchLog,
    report: &EvalReport,
    eval_hash: &str,
) -> Result<()> {
    let at = |e: analysis::AnalysisError| e.at(Stage::Analyze);
    let genotype = log.genotype;
    let dist = analysis::edge_distribution(&[genotype], GroupKey::of_log(log)).map_err(at)?;
    let timing = analysis::timing_curve(std::slice::from_ref(log), TimingMetric::Total).map_err(at)?;
    let mut lineage = report.lineage.clone();
    lineage.insert("eval_report".into(), eval_hash.to_string());
    let note: String = lineage
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join(" ");

    let summary = AnalysisSummary {
        genotype,
        degenerate: detect_degenerate(&genotype),
        cell_params: crate::nn::param_count(&genotype, cfg.search.channels, cfg.search.cells, input),
        edge_distribution: dist.clone(),
        timing: timing.clone(),
        lineage,
    };
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    let summary_hash = rec.write(Stage::Analyze, ANALYSIS_FILE, text.as_bytes(), Some(eval_hash))?;
    let dists = [dist];
    rec.write(
        Stage::Analyze,
        "edges.svg",
        analysis::distribution_svg(&dists, Some(&note)).as_bytes(),
        Some(&summary_hash),
    )?;
    rec.write(
        Stage::Analyze,
        "timing.svg",
        analysis::timing_svg(&timing, Some(&note)).as_bytes(),
        Some(&summary_hash),
    )?;
    let csv = analysis::distribution_csv(&dists).map_err(at)?;
    rec.write(Stage::Analyze, "edges.csv", csv.as_bytes(), Some(&summary_hash))?;
    let csv = analysis::timing_csv(&timing).map_err(at)?;
    rec.write(Stage::Analyze, "timing.csv", csv.as_bytes(), Some(&summary_hash))?;
    Ok(())
}

/// Re-runs the configuration recorded in a manifest, optionally into a
/// different output directory.
pub fn rerun_from_manifest(manifest: &Path, output_dir: Option<&Path>) -> Result<PipelineOutcome> {
    let m = Manifest::read(manifest)?;
    let mut cfg = m.config;
    if let Some(dir) = output_dir {
        cfg.output_dir = dir.to_path_buf();
    }
    run_pipeline(&cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_merge_deeply() {
        let cfg = parse_run_config(
            "seed = 3\n[sampling]\nmethod = \"rs\"\nratio = 0.25\n[search]\nepochs = 7\n",
            &[r#"{"sampling": {"ratio": 0.75}, "search": {"algorithm": "gdas"}}"#.into()],
        )
        .unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.sampling.method, Method::Random);
        assert_eq!(cfg.sampling.ratio, 0.75);
        assert_eq!(cfg.search.epochs, 7);
        assert_eq!(cfg.search.algorithm, crate::search::Algorithm::Gdas);
    }

    #[test]
    fn unknown_method_lists_valid_ones() {
        let err = parse_run_config("[sampling]\nmethod = \"magic\"\n", &[]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        for m in ["rs", "cc-rs", "km-or", "cc-or", "ae", "tl"] {
            assert!(err.message.contains(m), "{}", err.message);
        }
    }

    #[test]
    fn search_config_from_either_layout() {
        let a = parse_search_config("epochs = 4\nalgorithm = \"gdas\"\n").unwrap();
        let b = parse_search_config("seed = 1\n[search]\nepochs = 4\nalgorithm = \"gdas\"\n").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.epochs, 4);
        assert_eq!(
            parse_search_config("algorithm = \"darts2\"\n").unwrap_err().exit_code(),
            2
        );
        assert_eq!(parse_search_config("search = 3\n").unwrap_err().exit_code(), 2);
    }

    #[test]
    fn unknown_keys_and_bad_ratio_are_usage_errors() {
        assert_eq!(parse_run_config("colour = 1\n", &[]).unwrap_err().exit_code(), 2);
        assert_eq!(
            parse_run_config("[sampling]\nratio = 1.5\n", &[])
                .unwrap_err()
                .exit_code(),
            2
        );
        assert_eq!(parse_run_config("", &["{not json".into()]).unwrap_err().exit_code(), 2);
    }
}
