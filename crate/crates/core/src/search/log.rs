//! JSON-lines search logs: one `epoch` record per epoch (or per random
//! candidate) and a closing `final` record.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{ArchParams, Genotype, Result, SearchConfig, SearchError};
use crate::data::{Method, ProxyIndex};

/// Where the searched data came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub method: Method,
    pub ratio: f64,
    pub seed: u64,
    pub source_hash: String,
    pub proxy_count: usize,
    /// Digest of the proxy file contents.
    pub proxy_hash: String,
}

impl Provenance {
    pub fn from_proxy(p: &ProxyIndex) -> Self {
        Self {
            method: p.method(),
            ratio: p.ratio(),
            seed: p.seed(),
            source_hash: p.source_hash().to_string(),
            proxy_count: p.len(),
            proxy_hash: crate::data::sha256_hex(p.to_file_string().as_bytes()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Logits after the epoch; absent for random search.
    pub logits: Option<ArchParams>,
    pub genotype: Genotype,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Cumulative since the start of the search.
    pub wall_clock_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchLog {
    pub epochs: Vec<EpochRecord>,
    pub genotype: Genotype,
    pub config: SearchConfig,
    pub provenance: Provenance,
    pub total_ms: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Line {
    Epoch(EpochRecord),
    Final {
        genotype: Genotype,
        config: SearchConfig,
        provenance: Provenance,
        total_ms: f64,
    },
}

/// Cumulative millisecond clock that never repeats a reading.
pub(super) struct Clock {
    start: Instant,
    last: f64,
}

impl Clock {
    pub fn new(start: Instant) -> Self {
        Self { start, last: 0.0 }
    }

    pub fn tick(&mut self) -> f64 {
        let now = self.start.elapsed().as_secs_f64() * 1e3;
        // coarse timers can return the same instant twice
        self.last = if now > self.last { now } else { self.last + 1e-6 };
        self.last
    }

    pub fn total(&mut self) -> f64 {
        self.tick()
    }
}

impl SearchLog {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        let enc = |l: &Line| serde_json::to_string(l).map_err(|e| SearchError::Log(e.to_string()));
        for r in &self.epochs {
            out.push_str(&enc(&Line::Epoch(r.clone()))?);
            out.push('\n');
        }
        out.push_str(&enc(&Line::Final {
            genotype: self.genotype,
            config: self.config,
            provenance: self.provenance.clone(),
            total_ms: self.total_ms,
        })?);
        out.push('\n');
        Ok(out)
    }

    /// Wall-clock of each epoch on its own.
    pub fn epoch_durations(&self) -> Vec<f64> {
        let mut prev = 0.0;
        self.epochs
            .iter()
            .map(|r| {
                let d = r.wall_clock_ms - prev;
                prev = r.wall_clock_ms;
                d
            })
            .collect()
    }
}

pub fn write_search_log(path: &Path, log: &SearchLog) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(log.to_jsonl()?.as_bytes())?;
    w.flush()?;
    Ok(())
}

pub fn read_search_log(path: &Path) -> Result<SearchLog> {
    let reader = BufReader::new(File::open(path)?);
    let mut epochs = Vec::new();
    let mut fin = None;
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |e: serde_json::Error| SearchError::Log(format!("{}:{}: {e}", path.display(), n + 1));
        match serde_json::from_str::<Line>(&line).map_err(bad)? {
            Line::Epoch(r) => {
                if fin.is_some() {
                    return Err(SearchError::Log(format!(
                        "{}: epoch record after final record",
                        path.display()
                    )));
                }
                epochs.push(r);
            }
            Line::Final {
                genotype,
                config,
                provenance,
                total_ms,
            } => fin = Some((genotype, config, provenance, total_ms)),
        }
    }
    let (genotype, config, provenance, total_ms) =
        fin.ok_or_else(|| SearchError::Log(format!("{}: missing final record", path.display())))?;
    Ok(SearchLog {
        epochs,
        genotype,
        config,
        provenance,
        total_ms,
    })
}
