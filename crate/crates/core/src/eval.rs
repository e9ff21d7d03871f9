//! Cell evaluation: retrain a derived genotype from scratch at several
//! channel widths and seeds and summarize top-1 accuracy.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::SampleSource;
use crate::nn::{evaluate, fit, Genotype, MicroNet, NetConfig, NnError, TrainConfig};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid evaluation config: {0}")]
    Config(String),
    #[error("reports cover different widths: {left:?} vs {right:?}")]
    WidthMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("report json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

pub const DEFAULT_WIDTHS: [usize; 3] = [4, 8, 16];
pub const DEFAULT_SEEDS: [u64; 3] = [0, 1, 2];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub cells: usize,
    pub train: TrainConfig,
    /// Chunk size for test-set inference.
    pub eval_chunk: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            cells: 2,
            train: TrainConfig {
                epochs: 20,
                ..TrainConfig::default()
            },
            eval_chunk: 256,
        }
    }
}

/// One (width, seed) training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub width: usize,
    pub seed: u64,
    /// Top-1 accuracy on the held-out split; `None` for a failed run.
    pub accuracy: Option<f64>,
    pub final_train_loss: Option<f64>,
    /// Why the run failed, if it did.
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WidthSummary {
    pub width: usize,
    pub mean: Option<f64>,
    /// Sample standard deviation; needs at least two successful runs.
    pub std: Option<f64>,
    pub successful: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub genotype: Genotype,
    pub dataset: String,
    pub epochs: usize,
    pub runs: Vec<RunResult>,
    pub widths: Vec<WidthSummary>,
    /// Digests of the inputs this report derives from, keyed by role.
    #[serde(default)]
    pub lineage: BTreeMap<String, String>,
}

/// Mean and sample standard deviation (`n - 1`); std is `None` below two values.
pub fn mean_std(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std =
        (values.len() >= 2).then(|| (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt());
    (Some(mean), std)
}

impl EvalReport {
    /// Builds a report from individual runs, recomputing every summary.
    pub fn from_runs(genotype: Genotype, dataset: impl Into<String>, epochs: usize, runs: Vec<RunResult>) -> Self {
        let mut widths: Vec<usize> = runs.iter().map(|r| r.width).collect();
        widths.sort_unstable();
        widths.dedup();
        let widths = widths
            .into_iter()
            .map(|width| {
                let of_width = runs.iter().filter(|r| r.width == width);
                let acc: Vec<f64> = of_width.clone().filter_map(|r| r.accuracy).collect();
                let (mean, std) = mean_std(&acc);
                WidthSummary {
                    width,
                    mean,
                    std,
                    successful: acc.len(),
                    failed: of_width.count() - acc.len(),
                }
            })
            .collect();
        Self {
            genotype,
            dataset: dataset.into(),
            epochs,
            runs,
            widths,
            lineage: BTreeMap::new(),
        }
    }

    pub fn width_list(&self) -> Vec<usize> {
        self.widths.iter().map(|w| w.width).collect()
    }

    pub fn failed_runs(&self) -> impl Iterator<Item = &RunResult> {
        self.runs.iter().filter(|r| r.accuracy.is_none())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// One-row table with a `C=<width>` column per width, cells as
    /// `mean ± std` in percent.
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "| Genotype |");
        for w in &self.widths {
            let _ = write!(out, " C={} |", w.width);
        }
        out.push_str("\n|---|");
        out.push_str(&"---|".repeat(self.widths.len()));
        let _ = write!(out, "\n| `{}` |", self.genotype);
        for w in &self.widths {
            let _ = write!(out, " {} |", fmt_pct(w.mean, w.std));
        }
        out.push('\n');
        let failed: Vec<String> = self
            .failed_runs()
            .map(|r| format!("C={} seed {}", r.width, r.seed))
            .collect();
        if !failed.is_empty() {
            let _ = writeln!(out, "\nFailed runs (excluded): {}", failed.join(", "));
        }
        out
    }

    pub fn write(&self, json_path: &Path) -> Result<()> {
        std::fs::write(json_path, self.to_json()?)?;
        std::fs::write(json_path.with_extension("md"), self.to_markdown())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn fmt_pct(mean: Option<f64>, std: Option<f64>) -> String {
    match (mean, std) {
        (Some(m), Some(s)) => format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * s),
        (Some(m), None) => format!("{:.2}", 100.0 * m),
        _ => "failed".into(),
    }
}

/// Trains `genotype` from scratch on `train` for every (width, seed) pair and
/// measures top-1 accuracy on `test`. A run whose training loss goes
/// non-finite is recorded as failed and left out of the statistics.
pub fn evaluate_cell<S, T>(
    genotype: &Genotype,
    train: &S,
    test: &T,
    dataset: &str,
    widths: &[usize],
    seeds: &[u64],
    cfg: &EvalConfig,
) -> Result<EvalReport>
where
    S: SampleSource + ?Sized,
    T: SampleSource + ?Sized,
{
    if widths.is_empty() || widths.contains(&0) {
        return Err(EvalError::Config(format!(
            "widths must be non-empty and positive, got {widths:?}"
        )));
    }
    if seeds.is_empty() {
        return Err(EvalError::Config("at least one seed is needed".into()));
    }
    if train.shape() != test.shape() || train.num_classes() != test.num_classes() {
        return Err(EvalError::Config(
            "train and test splits disagree on shape or classes".into(),
        ));
    }
    let train_idx: Vec<usize> = (0..train.len()).collect();
    let test_idx: Vec<usize> = (0..test.len()).collect();
    let mut runs = Vec::with_capacity(widths.len() * seeds.len());
    for &width in widths {
        for &seed in seeds {
            let net_cfg = NetConfig {
                channels: width,
                cells: cfg.cells,
                input: train.shape(),
                num_classes: train.num_classes(),
            };
            let mut net = MicroNet::for_genotype(*genotype, net_cfg, seed)?;
            let run = match fit(&mut net, train, &train_idx, &cfg.train, seed) {
                Ok(hist) => {
                    let (_, acc) = evaluate(&net, test, &test_idx, cfg.eval_chunk)?;
                    RunResult {
                        width,
                        seed,
                        accuracy: Some(acc),
                        final_train_loss: hist.last().copied(),
                        failure: None,
                    }
                }
                Err(NnError::NonFinite(what)) => {
                    log::warn!("evaluation run C={width} seed {seed} failed: non-finite {what}");
                    RunResult {
                        width,
                        seed,
                        accuracy: None,
                        final_train_loss: None,
                        failure: Some(format!("non-finite {what}")),
                    }
                }
                Err(e) => return Err(e.into()),
            };
            runs.push(run);
        }
    }
    Ok(EvalReport::from_runs(*genotype, dataset, cfg.train.epochs, runs))
}

/// Accuracy difference per width between two reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Delta {
    pub width: usize,
    /// Proxy-derived minus full-derived mean accuracy.
    pub delta: Option<f64>,
    /// `sqrt(std_a^2 + std_b^2)` when both stds exist.
    pub combined_std: Option<f64>,
}

pub fn compare_to_baseline(proxy: &EvalReport, full: &EvalReport) -> Result<Vec<Delta>> {
    let (left, right) = (proxy.width_list(), full.width_list());
    if left != right {
        return Err(EvalError::WidthMismatch { left, right });
    }
    Ok(proxy
        .widths
        .iter()
        .zip(&full.widths)
        .map(|(p, f)| Delta {
            width: p.width,
            delta: p.mean.zip(f.mean).map(|(a, b)| a - b),
            combined_std: p.std.zip(f.std).map(|(a, b)| (a * a + b * b).sqrt()),
        })
        .collect())
}

/// Markdown rendering of a delta table, in percentage points.
pub fn deltas_to_markdown(deltas: &[Delta]) -> String {
    let mut out = String::from("| Width | Δ (p.p.) |\n|---|---|\n");
    for d in deltas {
        let cell = match (d.delta, d.combined_std) {
            (Some(v), Some(s)) => format!("{:+.2} ± {:.2}", 100.0 * v, 100.0 * s),
            (Some(v), None) => format!("{:+.2}", 100.0 * v),
            _ => "n/a".into(),
        };
        let _ = writeln!(out, "| C={} | {cell} |", d.width);
    }
    out
}
