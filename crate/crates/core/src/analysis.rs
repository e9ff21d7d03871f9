//! Post-hoc analysis over many search runs: per-edge operation frequencies
//! and search time against proxy ratio, with SVG and CSV output.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Method;
use crate::nn::{Genotype, OpKind, EDGES, NUM_EDGES, NUM_OPS};
use crate::search::{Algorithm, SearchLog};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("nothing to analyze: {0}")]
    Empty(String),
    #[error("log {index} has no usable proxy ratio ({ratio})")]
    MissingProvenance { index: usize, ratio: f64 },
    #[error("csv {path}: {reason}")]
    Csv { path: String, reason: String },
    #[error("cannot write {path}: {source}")]
    Write {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AnalysisError>;

/// What a distribution was aggregated over.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GroupKey {
    pub algorithm: Option<Algorithm>,
    pub method: Option<Method>,
    pub ratio: Option<f64>,
}

impl GroupKey {
    pub fn of_log(log: &SearchLog) -> Self {
        Self {
            algorithm: Some(log.config.algorithm),
            method: Some(log.provenance.method),
            ratio: Some(log.provenance.ratio),
        }
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if let Some(a) = self.algorithm {
            parts.push(a.to_string());
        }
        if let Some(m) = self.method {
            parts.push(m.to_string());
        }
        if let Some(r) = self.ratio {
            parts.push(format!("r={r}"));
        }
        if parts.is_empty() {
            "all".into()
        } else {
            parts.join(" ")
        }
    }
}

/// Per-edge operation counts over a set of runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeDistribution {
    pub key: GroupKey,
    pub run_count: u64,
    /// `counts[edge][op]`, edges in [`EDGES`] order, ops in [`OpKind::ALL`] order.
    pub counts: [[u64; NUM_OPS]; NUM_EDGES],
}

impl EdgeDistribution {
    /// Frequencies of each op on `edge` (0-based), divided once.
    pub fn probabilities(&self, edge: usize) -> [f64; NUM_OPS] {
        let n = self.run_count as f64;
        std::array::from_fn(|o| self.counts[edge][o] as f64 / n)
    }
}

pub fn edge_distribution(genotypes: &[Genotype], key: GroupKey) -> Result<EdgeDistribution> {
    if genotypes.is_empty() {
        return Err(AnalysisError::Empty("edge distribution over no genotypes".into()));
    }
    let mut counts = [[0u64; NUM_OPS]; NUM_EDGES];
    for g in genotypes {
        for (e, op) in g.ops().iter().enumerate() {
            counts[e][op.index()] += 1;
        }
    }
    Ok(EdgeDistribution {
        key,
        run_count: genotypes.len() as u64,
        counts,
    })
}

/// One distribution per (algorithm, method, ratio) found in `logs`, in
/// order of first appearance.
pub fn edge_distributions_by_key(logs: &[SearchLog]) -> Result<Vec<EdgeDistribution>> {
    if logs.is_empty() {
        return Err(AnalysisError::Empty("no search logs".into()));
    }
    let mut groups: Vec<(GroupKey, Vec<Genotype>)> = Vec::new();
    for log in logs {
        let key = GroupKey::of_log(log);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, gs)) => gs.push(log.genotype),
            None => groups.push((key, vec![log.genotype])),
        }
    }
    groups.into_iter().map(|(k, gs)| edge_distribution(&gs, k)).collect()
}

/// Which wall-clock figure of a log to aggregate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TimingMetric {
    /// Cumulative time of the whole search.
    #[default]
    Total,
    /// Mean duration of one epoch.
    PerEpoch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingPoint {
    pub ratio: f64,
    pub mean_ms: f64,
    /// Sample standard deviation, 0 for a single run.
    pub std_ms: f64,
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingCurve {
    pub machine: String,
    pub metric: TimingMetric,
    /// Sorted by ratio.
    pub points: Vec<TimingPoint>,
}

/// OS, architecture and available parallelism of this machine.
pub fn machine_descriptor() -> String {
    let cpus = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!("{}-{} ({cpus} cpus)", std::env::consts::OS, std::env::consts::ARCH)
}

impl TimingCurve {
    /// Strictly increasing mean time over increasing ratio.
    pub fn is_monotone_increasing(&self) -> bool {
        self.points.windows(2).all(|w| w[1].mean_ms > w[0].mean_ms)
    }

    /// Least-squares slope of mean time against ratio, in ms per unit ratio.
    pub fn slope(&self) -> Option<f64> {
        let n = self.points.len() as f64;
        if self.points.len() < 2 {
            return None;
        }
        let mx = self.points.iter().map(|p| p.ratio).sum::<f64>() / n;
        let my = self.points.iter().map(|p| p.mean_ms).sum::<f64>() / n;
        let sxy: f64 = self.points.iter().map(|p| (p.ratio - mx) * (p.mean_ms - my)).sum();
        let sxx: f64 = self.points.iter().map(|p| (p.ratio - mx).powi(2)).sum();
        (sxx > 0.0).then(|| sxy / sxx)
    }

    pub fn point(&self, ratio: f64) -> Option<&TimingPoint> {
        self.points.iter().find(|p| (p.ratio - ratio).abs() < 1e-12)
    }
}

pub fn timing_curve(logs: &[SearchLog], metric: TimingMetric) -> Result<TimingCurve> {
    if logs.is_empty() {
        return Err(AnalysisError::Empty("no search logs".into()));
    }
    let mut groups: Vec<(f64, Vec<f64>)> = Vec::new();
    for (index, log) in logs.iter().enumerate() {
        let ratio = log.provenance.ratio;
        if !(ratio > 0.0 && ratio <= 1.0) {
            return Err(AnalysisError::MissingProvenance { index, ratio });
        }
        let t = match metric {
            TimingMetric::Total => log.total_ms,
            TimingMetric::PerEpoch => {
                let d = log.epoch_durations();
                if d.is_empty() {
                    return Err(AnalysisError::Empty(format!("log {index} has no epochs")));
                }
                d.iter().sum::<f64>() / d.len() as f64
            }
        };
        match groups.iter_mut().find(|(r, _)| *r == ratio) {
            Some((_, ts)) => ts.push(t),
            None => groups.push((ratio, vec![t])),
        }
    }
    groups.sort_by(|a, b| a.0.total_cmp(&b.0));
    let points = groups
        .into_iter()
        .map(|(ratio, ts)| {
            let (mean, std) = crate::eval::mean_std(&ts);
            TimingPoint {
                ratio,
                mean_ms: mean.expect("non-empty group"),
                std_ms: std.unwrap_or(0.0),
                runs: ts.len(),
            }
        })
        .collect();
    Ok(TimingCurve {
        machine: machine_descriptor(),
        metric,
        points,
    })
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).map_err(|source| AnalysisError::Write {
        path: path.display().to_string(),
        source,
    })
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

pub fn op_color(op: OpKind) -> &'static str {
    match op {
        OpKind::Conv3x3 => "#d62728",
        OpKind::Conv1x1 => "#ff7f0e",
        OpKind::AvgPool3x3 => "#2ca02c",
        OpKind::Skip => "#1f77b4",
        OpKind::Zeroize => "#7f7f7f",
    }
}

const PIE_R: f64 = 34.0;
const CELL: f64 = 90.0;
const LABEL_W: f64 = 150.0;
const TOP: f64 = 40.0;

fn pie(out: &mut String, cx: f64, cy: f64, probs: &[f64; NUM_OPS]) {
    if let Some(o) = probs.iter().position(|&p| p >= 1.0) {
        let _ = writeln!(
            out,
            r#"<circle cx="{cx:.2}" cy="{cy:.2}" r="{PIE_R}" fill="{}"/>"#,
            op_color(OpKind::ALL[o])
        );
        return;
    }
    let mut angle = -std::f64::consts::FRAC_PI_2;
    for (o, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        let sweep = p * std::f64::consts::TAU;
        let (x0, y0) = (cx + PIE_R * angle.cos(), cy + PIE_R * angle.sin());
        let end = angle + sweep;
        let (x1, y1) = (cx + PIE_R * end.cos(), cy + PIE_R * end.sin());
        let large = u8::from(sweep > std::f64::consts::PI);
        let _ = writeln!(
            out,
            r#"<path d="M {cx:.2} {cy:.2} L {x0:.2} {y0:.2} A {PIE_R} {PIE_R} 0 {large} 1 {x1:.2} {y1:.2} Z" fill="{}"/>"#,
            op_color(OpKind::ALL[o])
        );
        angle = end;
    }
}

fn desc(out: &mut String, note: Option<&str>) {
    if let Some(n) = note {
        let _ = writeln!(out, "<desc>{}</desc>", xml_escape(n));
    }
}

/// Pie chart per edge, one row per distribution. `note` becomes the SVG
/// description.
pub fn distribution_svg(dists: &[EdgeDistribution], note: Option<&str>) -> String {
    let width = LABEL_W + CELL * NUM_EDGES as f64 + 20.0;
    let legend_y = TOP + CELL * dists.len() as f64 + 10.0;
    let height = legend_y + 30.0;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">"#
    );
    out.push_str("<title>Cell edge distribution</title>\n");
    desc(&mut out, note);
    for (e, (from, to)) in EDGES.iter().enumerate() {
        let x = LABEL_W + CELL * (e as f64 + 0.5);
        let _ = writeln!(
            out,
            r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{from}→{to}</text>"#,
            TOP - 12.0
        );
    }
    for (row, d) in dists.iter().enumerate() {
        let cy = TOP + CELL * (row as f64 + 0.5);
        let _ = writeln!(
            out,
            r#"<text x="8" y="{cy:.1}">{} (n={})</text>"#,
            xml_escape(&d.key.label()),
            d.run_count
        );
        for e in 0..NUM_EDGES {
            pie(&mut out, LABEL_W + CELL * (e as f64 + 0.5), cy, &d.probabilities(e));
        }
    }
    for (o, op) in OpKind::ALL.iter().enumerate() {
        let x = 8.0 + 130.0 * o as f64;
        let _ = writeln!(
            out,
            r#"<rect x="{x}" y="{legend_y}" width="12" height="12" fill="{}"/><text x="{}" y="{}">{}</text>"#,
            op_color(*op),
            x + 16.0,
            legend_y + 10.0,
            op.name()
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Line plot of mean time against ratio with one-std error bars.
pub fn timing_svg(curve: &TimingCurve, note: Option<&str>) -> String {
    let (w, h, m) = (480.0, 320.0, 50.0);
    let ymax = curve
        .points
        .iter()
        .map(|p| p.mean_ms + p.std_ms)
        .fold(0.0, f64::max)
        .max(1e-9)
        * 1.1;
    let sx = |r: f64| m + r * (w - 2.0 * m);
    let sy = |t: f64| h - m - t / ymax * (h - 2.0 * m);
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(
        out,
        "<title>Search time over proxy ratio ({})</title>",
        xml_escape(&curve.machine)
    );
    desc(&mut out, note);
    let _ = writeln!(
        out,
        r#"<line x1="{m}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/><line x1="{m}" y1="{m}" x2="{m}" y2="{0}" stroke="black"/>"#,
        h - m,
        w - m
    );
    for tick in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{tick}</text>"#,
            sx(tick),
            h - m + 16.0
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">ratio r</text>"#,
        w / 2.0,
        h - 10.0
    );
    for k in 0..=4 {
        let t = ymax * k as f64 / 4.0;
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{t:.0}</text>"#,
            m - 4.0,
            sy(t) + 4.0
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="12" y="{:.1}" transform="rotate(-90 12 {:.1})" text-anchor="middle">ms</text>"#,
        h / 2.0,
        h / 2.0
    );
    let pts: Vec<String> = curve
        .points
        .iter()
        .map(|p| format!("{:.2},{:.2}", sx(p.ratio), sy(p.mean_ms)))
        .collect();
    let _ = writeln!(
        out,
        r##"<polyline points="{}" fill="none" stroke="#1f77b4" stroke-width="2"/>"##,
        pts.join(" ")
    );
    for p in &curve.points {
        let (x, lo, hi) = (
            sx(p.ratio),
            sy((p.mean_ms - p.std_ms).max(0.0)),
            sy(p.mean_ms + p.std_ms),
        );
        let _ = writeln!(
            out,
            r##"<line x1="{x:.2}" y1="{lo:.2}" x2="{x:.2}" y2="{hi:.2}" stroke="#333"/><line x1="{:.2}" y1="{lo:.2}" x2="{:.2}" y2="{lo:.2}" stroke="#333"/><line x1="{:.2}" y1="{hi:.2}" x2="{:.2}" y2="{hi:.2}" stroke="#333"/><circle cx="{x:.2}" cy="{:.2}" r="3" fill="#1f77b4"/>"##,
            x - 4.0,
            x + 4.0,
            x - 4.0,
            x + 4.0,
            sy(p.mean_ms)
        );
    }
    out.push_str("</svg>\n");
    out
}

pub fn emit_distribution_svg(dists: &[EdgeDistribution], path: &Path) -> Result<()> {
    write_file(path, &distribution_svg(dists, None))
}

pub fn emit_timing_svg(curve: &TimingCurve, path: &Path) -> Result<()> {
    write_file(path, &timing_svg(curve, None))
}

#[derive(Debug, Serialize, Deserialize)]
struct DistRow {
    algorithm: Option<Algorithm>,
    method: Option<Method>,
    ratio: Option<f64>,
    runs: u64,
    edge: usize,
    from: usize,
    to: usize,
    op: OpKind,
    count: u64,
    prob: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TimingRow {
    ratio: f64,
    mean_ms: f64,
    std_ms: f64,
    runs: usize,
    metric: TimingMetric,
    machine: String,
}

fn csv_err(path: &Path, e: impl std::fmt::Display) -> AnalysisError {
    AnalysisError::Csv {
        path: path.display().to_string(),
        reason: e.to_string(),
    }
}

fn csv_string<T: Serialize>(rows: impl IntoIterator<Item = T>) -> Result<String> {
    let in_memory = Path::new("<memory>");
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(in_memory, e))?;
    }
    let bytes = w.into_inner().map_err(|e| csv_err(in_memory, e))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// One row per (distribution, edge, op); edges are numbered from 1.
pub fn distribution_csv(dists: &[EdgeDistribution]) -> Result<String> {
    let rows = dists.iter().flat_map(|d| {
        (0..NUM_EDGES).flat_map(move |e| {
            let probs = d.probabilities(e);
            OpKind::ALL.into_iter().map(move |op| DistRow {
                algorithm: d.key.algorithm,
                method: d.key.method,
                ratio: d.key.ratio,
                runs: d.run_count,
                edge: e + 1,
                from: EDGES[e].0,
                to: EDGES[e].1,
                op,
                count: d.counts[e][op.index()],
                prob: probs[op.index()],
            })
        })
    });
    csv_string(rows)
}

pub fn emit_distribution_csv(dists: &[EdgeDistribution], path: &Path) -> Result<()> {
    write_file(path, &distribution_csv(dists)?)
}

pub fn read_distribution_csv(path: &Path) -> Result<Vec<EdgeDistribution>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut out: Vec<EdgeDistribution> = Vec::new();
    for row in reader.deserialize::<DistRow>() {
        let row = row.map_err(|e| csv_err(path, e))?;
        if !(1..=NUM_EDGES).contains(&row.edge) {
            return Err(csv_err(path, format!("edge {} out of range", row.edge)));
        }
        let key = GroupKey {
            algorithm: row.algorithm,
            method: row.method,
            ratio: row.ratio,
        };
        let d = match out.iter_mut().position(|d| d.key == key) {
            Some(i) => &mut out[i],
            None => {
                out.push(EdgeDistribution {
                    key,
                    run_count: row.runs,
                    counts: [[0; NUM_OPS]; NUM_EDGES],
                });
                out.last_mut().expect("just pushed")
            }
        };
        d.counts[row.edge - 1][row.op.index()] = row.count;
    }
    if out.is_empty() {
        return Err(csv_err(path, "no rows"));
    }
    Ok(out)
}

pub fn timing_csv(curve: &TimingCurve) -> Result<String> {
    csv_string(curve.points.iter().map(|p| TimingRow {
        ratio: p.ratio,
        mean_ms: p.mean_ms,
        std_ms: p.std_ms,
        runs: p.runs,
        metric: curve.metric,
        machine: curve.machine.clone(),
    }))
}

pub fn emit_timing_csv(curve: &TimingCurve, path: &Path) -> Result<()> {
    write_file(path, &timing_csv(curve)?)
}

pub fn read_timing_csv(path: &Path) -> Result<TimingCurve> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut points = Vec::new();
    let mut meta = None;
    for row in reader.deserialize::<TimingRow>() {
        let row = row.map_err(|e| csv_err(path, e))?;
        meta.get_or_insert((row.machine, row.metric));
        points.push(TimingPoint {
            ratio: row.ratio,
            mean_ms: row.mean_ms,
            std_ms: row.std_ms,
            runs: row.runs,
        });
    }
    let (machine, metric) = meta.ok_or_else(|| csv_err(path, "no rows"))?;
    Ok(TimingCurve {
        machine,
        metric,
        points,
    })
}
