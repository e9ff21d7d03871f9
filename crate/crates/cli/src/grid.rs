//! Runs a (algorithm x method x ratio x seed) grid of pipelines, each in its
//! own child process of this binary.

use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::thread;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::Args;
use proxyslice::pipeline::{FailureKind, PipelineError, Stage};
use serde_json::json;

#[derive(Args)]
pub struct GridArgs {
    /// Base TOML run configuration shared by every cell of the grid.
    #[arg(long)]
    config: Option<PathBuf>,
    /// JSON override applied to every run before the grid values.
    #[arg(long = "set")]
    overrides: Vec<String>,
    #[arg(long, value_delimiter = ',', default_values_t = ["darts1".to_string()])]
    algos: Vec<String>,
    #[arg(long, value_delimiter = ',', required = true)]
    methods: Vec<String>,
    #[arg(long, value_delimiter = ',', required = true)]
    ratios: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [0u64])]
    seeds: Vec<u64>,
    /// Parent directory; each run gets `<algo>-<method>-r<ratio>-s<seed>`.
    #[arg(long)]
    out: PathBuf,
    /// Concurrent processes.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

struct Job {
    name: String,
    args: Vec<String>,
}

fn jobs(a: &GridArgs, data_dir: Option<&Path>) -> Vec<Job> {
    let mut out = Vec::new();
    for algo in &a.algos {
        for method in &a.methods {
            for &ratio in &a.ratios {
                for &seed in &a.seeds {
                    let name = format!("{algo}-{method}-r{ratio}-s{seed}");
                    let mut args = vec!["pipeline".to_string()];
                    if let Some(c) = &a.config {
                        args.extend(["--config".into(), c.display().to_string()]);
                    }
                    for o in &a.overrides {
                        args.extend(["--set".into(), o.clone()]);
                    }
                    let cell = json!({"sampling": {"method": method, "ratio": ratio}, "search": {"algorithm": algo}});
                    args.extend(["--set".into(), cell.to_string()]);
                    args.extend(["--seed".into(), seed.to_string()]);
                    args.extend(["--out".into(), a.out.join(&name).display().to_string()]);
                    if let Some(d) = data_dir {
                        args.extend(["--data-dir".into(), d.display().to_string()]);
                    }
                    out.push(Job { name, args });
                }
            }
        }
    }
    out
}

fn spawn(exe: &Path, job: &Job, log_dir: &Path) -> Result<Child> {
    log::info!("starting {}", job.name);
    let log = File::create(log_dir.join(format!("{}.log", job.name)))?;
    Command::new(exe)
        .args(&job.args)
        .stdout(log.try_clone()?)
        .stderr(log)
        .stdin(Stdio::null())
        .spawn()
        .with_context(|| format!("spawning {}", job.name))
}

pub fn run(a: GridArgs, seed: Option<u64>, data_dir: Option<&Path>) -> Result<()> {
    if seed.is_some() {
        bail!(PipelineError::new(
            Stage::Config,
            FailureKind::Usage,
            "grid takes --seeds, not --seed"
        ));
    }
    if a.jobs == 0 {
        bail!(PipelineError::new(
            Stage::Config,
            FailureKind::Usage,
            "--jobs must be positive"
        ));
    }
    std::fs::create_dir_all(&a.out).with_context(|| a.out.display().to_string())?;
    let exe = std::env::current_exe()?;
    let queue = jobs(&a, data_dir);
    let mut pending = queue.iter().enumerate();
    let mut running: Vec<(usize, Child)> = Vec::new();
    let mut codes: Vec<Option<i32>> = vec![None; queue.len()];
    loop {
        while running.len() < a.jobs {
            let Some((i, job)) = pending.next() else { break };
            running.push((i, spawn(&exe, job, &a.out)?));
        }
        if running.is_empty() {
            break;
        }
        let mut still = Vec::with_capacity(running.len());
        for (i, mut child) in running {
            match child.try_wait()? {
                Some(status) => {
                    let code = status.code().unwrap_or(1);
                    println!("{}\texit {code}", queue[i].name);
                    codes[i] = Some(code);
                }
                None => still.push((i, child)),
            }
        }
        running = still;
        thread::sleep(Duration::from_millis(20));
    }
    let failed: Vec<(usize, i32)> = codes
        .iter()
        .enumerate()
        .filter_map(|(i, c)| c.filter(|&c| c != 0).map(|c| (i, c)))
        .collect();
    if let Some(&(first, code)) = failed.first() {
        let kind = match code {
            2 => FailureKind::Usage,
            3 => FailureKind::Data,
            4 => FailureKind::Numeric,
            _ => FailureKind::Io,
        };
        bail!(PipelineError::new(
            Stage::Config,
            kind,
            format!(
                "{} of {} runs failed, first: {} (see its .log)",
                failed.len(),
                queue.len(),
                queue[first].name
            )
        ));
    }
    Ok(())
}
