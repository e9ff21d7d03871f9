//! Cell search on a proxy: first-order relaxed search, Gumbel-sampled
//! search and a random-search baseline.

mod log;

use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, ProxyIndex, SampleSource};
use crate::nn::train::shuffled_batches;
use crate::nn::{
    arch_step, fit, Batch, CellMode, MicroNet, NetConfig, NnError, OpKind, Sgd, TrainConfig, NUM_EDGES, NUM_OPS,
};

pub use self::log::{read_search_log, write_search_log, EpochRecord, Provenance, SearchLog};
pub use crate::nn::{ArchParams, Genotype};

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("invalid search config: {0}")]
    Config(String),
    #[error("non-finite {phase} loss at epoch {epoch}, step {step}; logits {snapshot:?}")]
    NonFinite {
        phase: &'static str,
        epoch: usize,
        step: usize,
        snapshot: Box<ArchParams>,
    },
    #[error("search log: {0}")]
    Log(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SearchError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Darts1,
    /// Second-order relaxed search; reserved and rejected.
    Darts2,
    Gdas,
    Random,
}

impl Algorithm {
    pub fn tag(self) -> &'static str {
        match self {
            Algorithm::Darts1 => "darts1",
            Algorithm::Darts2 => "darts2",
            Algorithm::Gdas => "gdas",
            Algorithm::Random => "random",
        }
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Algorithm {
    type Err = SearchError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "darts1" => Ok(Algorithm::Darts1),
            "darts2" => Ok(Algorithm::Darts2),
            "gdas" => Ok(Algorithm::Gdas),
            "random" => Ok(Algorithm::Random),
            _ => Err(SearchError::Config(format!(
                "unknown algorithm '{s}' (valid: darts1, gdas, random)"
            ))),
        }
    }
}

/// How the proxy and the weight/architecture split interact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMode {
    /// Split the proxy itself into weight-train and arch-val pools.
    #[default]
    SplitProxy,
    /// Split the full dataset first; only the weight-train pool is reduced
    /// to proxy members, the arch-val pool stays full.
    ReduceTrainOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub algorithm: Algorithm,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_weights: f64,
    pub momentum: f64,
    pub grad_clip: Option<f64>,
    pub lr_arch: f64,
    /// Half-width of the uniform initial logits.
    pub arch_init: f64,
    /// Epochs at the start that train weights only.
    pub arch_warmup: usize,
    pub tau_start: f64,
    pub tau_end: f64,
    pub seed: u64,
    pub split_fraction: f64,
    pub split_mode: SplitMode,
    pub channels: usize,
    pub cells: usize,
    /// Candidates tried by random search.
    pub random_budget: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Darts1,
            epochs: 50,
            batch_size: 16,
            lr_weights: 0.05,
            momentum: 0.9,
            grad_clip: Some(5.0),
            lr_arch: 0.3,
            arch_init: 1e-3,
            arch_warmup: 0,
            tau_start: 10.0,
            tau_end: 0.1,
            seed: 0,
            split_fraction: 0.5,
            split_mode: SplitMode::SplitProxy,
            channels: 4,
            cells: 2,
            random_budget: 50,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SearchError::Config(m));
        if self.algorithm == Algorithm::Darts2 {
            return bad("darts2 (second-order) is reserved and not implemented; use darts1".into());
        }
        if !(self.tau_start >= self.tau_end && self.tau_end > 0.0) {
            return bad(format!(
                "need tau_start >= tau_end > 0, got {} and {}",
                self.tau_start, self.tau_end
            ));
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return bad(format!("split_fraction {} not in (0, 1)", self.split_fraction));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.channels == 0 {
            return bad("epochs, batch_size and channels must be positive".into());
        }
        if !(self.lr_weights >= 0.0 && self.lr_arch >= 0.0) {
            return bad("learning rates must be non-negative".into());
        }
        if self.algorithm == Algorithm::Random && self.random_budget == 0 {
            return bad("random_budget must be at least 1".into());
        }
        Ok(())
    }

    /// Temperature for `epoch`, linear from `tau_start` to `tau_end`.
    pub fn tau(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return self.tau_start;
        }
        let t = epoch.min(self.epochs - 1) as f64 / (self.epochs - 1) as f64;
        self.tau_start + (self.tau_end - self.tau_start) * t
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr_weights,
            momentum: self.momentum,
            grad_clip: self.grad_clip,
            target_loss: None,
        }
    }
}

/// Seeded source of Gumbel(0, 1) noise, one row of five per edge.
#[derive(Debug, Clone)]
pub struct GumbelSampler {
    rng: ChaCha8Rng,
}

impl GumbelSampler {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn draw(&mut self) -> [[f64; NUM_OPS]; NUM_EDGES] {
        let mut g = [[0.0; NUM_OPS]; NUM_EDGES];
        for v in g.iter_mut().flatten() {
            // u in (0, 1): random::<f64>() is in [0, 1), so flip it
            let u = 1.0 - self.rng.random::<f64>();
            *v = -(-u.ln()).ln();
        }
        g
    }
}

/// `softmax((logits + gumbel) / tau)` for one edge.
pub fn soft_sample(logits: &[f64; NUM_OPS], gumbel: &[f64; NUM_OPS], tau: f64) -> [f64; NUM_OPS] {
    let z: Vec<f64> = logits.iter().zip(gumbel).map(|(l, g)| (l + g) / tau).collect();
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    std::array::from_fn(|i| e[i] / s)
}

/// The op each edge uses under a given Gumbel draw.
pub fn sampled_genotype(arch: &ArchParams, gumbel: &[[f64; NUM_OPS]; NUM_EDGES]) -> Genotype {
    let mut shifted = arch.logits;
    for (row, g) in shifted.iter_mut().zip(gumbel) {
        row.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }
    ArchParams { logits: shifted }.argmax()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub train: f64,
    pub val: f64,
}

fn check(loss: f64, phase: &'static str, epoch: usize, step: usize, arch: &ArchParams) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(SearchError::NonFinite {
            phase,
            epoch,
            step,
            snapshot: Box::new(*arch),
        })
    }
}

/// One first-order step: SGD on the weights from the train batch, then
/// SGD on the logits from the validation batch with weights held fixed.
pub fn darts_step(
    net: &mut MicroNet,
    opt: &mut Sgd,
    arch: &mut ArchParams,
    train: &Batch,
    val: &Batch,
    lr_arch: f64,
) -> std::result::Result<StepLosses, NnError> {
    let (train_loss, grads) = net.loss_and_grad(train, CellMode::Relaxed(arch))?;
    if !train_loss.is_finite() {
        return Ok(StepLosses {
            train: train_loss,
            val: f64::NAN,
        });
    }
    opt.step(net.params_mut(), &grads);
    let (val_loss, grads) = net.loss_and_grad(val, CellMode::Relaxed(arch))?;
    if val_loss.is_finite() {
        arch_step(arch, &grads, lr_arch);
    }
    Ok(StepLosses {
        train: train_loss,
        val: val_loss,
    })
}

/// One sampled step: each edge runs only its Gumbel-max op with a
/// straight-through gradient to the logits.
#[allow(clippy::too_many_arguments)]
pub fn gdas_step(
    net: &mut MicroNet,
    opt: &mut Sgd,
    arch: &mut ArchParams,
    train: &Batch,
    val: &Batch,
    tau: f64,
    lr_arch: f64,
    gumbel: &mut GumbelSampler,
) -> std::result::Result<StepLosses, NnError> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(NnError::Usage(format!("temperature must be positive, got {tau}")));
    }
    let noise = gumbel.draw();
    let mode = CellMode::Sampled {
        arch,
        gumbel: &noise,
        tau,
    };
    let (train_loss, grads) = net.loss_and_grad(train, mode)?;
    if !train_loss.is_finite() {
        return Ok(StepLosses {
            train: train_loss,
            val: f64::NAN,
        });
    }
    opt.step(net.params_mut(), &grads);
    let noise = gumbel.draw();
    let mode = CellMode::Sampled {
        arch,
        gumbel: &noise,
        tau,
    };
    let (val_loss, grads) = net.loss_and_grad(val, mode)?;
    if val_loss.is_finite() {
        arch_step(arch, &grads, lr_arch);
    }
    Ok(StepLosses {
        train: train_loss,
        val: val_loss,
    })
}

/// Per-edge argmax of the logits (ties go to the lowest op index).
pub fn derive_genotype(arch: &ArchParams) -> Genotype {
    arch.argmax()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DegenerateReport {
    pub all_skip: bool,
    pub zero_param: bool,
}

pub fn detect_degenerate(genotype: &Genotype) -> DegenerateReport {
    DegenerateReport {
        all_skip: genotype.ops().iter().all(|&op| op == OpKind::Skip),
        zero_param: genotype.ops().iter().all(|op| !op.is_conv()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RandomSearchResult {
    pub best: Genotype,
    pub score: f64,
    /// Candidates in the order they were evaluated.
    pub evaluated: Vec<(Genotype, f64)>,
}

/// Evaluates `budget` distinct uniformly drawn genotypes and keeps the
/// highest score; the first candidate wins ties.
pub fn random_search<F>(budget: usize, seed: u64, mut evaluator: F) -> Result<RandomSearchResult>
where
    F: FnMut(&Genotype) -> Result<f64>,
{
    if budget == 0 {
        return Err(SearchError::Config("random search budget must be at least 1".into()));
    }
    let space = Genotype::SPACE_SIZE;
    let budget = if budget > space {
        ::log::warn!("random search budget {budget} exceeds the {space} genotypes; capping");
        space
    } else {
        budget
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let codes = rand::seq::index::sample(&mut rng, space, budget);
    let mut evaluated = Vec::with_capacity(budget);
    let mut best: Option<(Genotype, f64)> = None;
    for code in codes.iter() {
        let g = Genotype::from_code(code).expect("code in range");
        let score = evaluator(&g)?;
        if best.is_none_or(|(_, s)| score > s) {
            best = Some((g, score));
        }
        evaluated.push((g, score));
    }
    let (best, score) = best.expect("budget >= 1");
    Ok(RandomSearchResult { best, score, evaluated })
}

/// Weight-train and arch-val pools for a search on `proxy`.
pub fn split_pools(n_samples: usize, proxy: &ProxyIndex, cfg: &SearchConfig) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_5B11);
    let split = |pool: &[usize], rng: &mut ChaCha8Rng| {
        let mut p = pool.to_vec();
        p.shuffle(rng);
        let k = ((p.len() as f64 * cfg.split_fraction).floor() as usize).clamp(1, p.len().saturating_sub(1));
        let val = p.split_off(k);
        (p, val)
    };
    let (mut train, mut val) = match cfg.split_mode {
        SplitMode::SplitProxy => {
            if proxy.len() < 2 {
                return Err(SearchError::Config("proxy needs at least two samples to split".into()));
            }
            split(proxy.indices(), &mut rng)
        }
        SplitMode::ReduceTrainOnly => {
            let all: Vec<usize> = (0..n_samples).collect();
            let (train, val) = split(&all, &mut rng);
            let member = proxy.indicator(n_samples);
            let train: Vec<usize> = train.into_iter().filter(|&i| member[i]).collect();
            if train.is_empty() {
                return Err(SearchError::Config("no proxy samples fall in the training pool".into()));
            }
            (train, val)
        }
    };
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

/// Result of a complete search run.
#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub genotype: Genotype,
    pub arch: ArchParams,
    pub log: SearchLog,
}

fn net_config<S: SampleSource + ?Sized>(data: &S, cfg: &SearchConfig) -> NetConfig {
    NetConfig {
        channels: cfg.channels,
        cells: cfg.cells,
        input: data.shape(),
        num_classes: data.num_classes(),
    }
}

/// Runs the configured search on the proxy members of `data`.
pub fn run_search<S: SampleSource + ?Sized>(data: &S, proxy: &ProxyIndex, cfg: &SearchConfig) -> Result<SearchOutcome> {
    cfg.validate()?;
    if proxy.indices().last().is_some_and(|&i| i >= data.len()) {
        return Err(SearchError::Config("proxy indexes past the end of the dataset".into()));
    }
    let (train, val) = split_pools(data.len(), proxy, cfg)?;
    let provenance = Provenance::from_proxy(proxy);
    let start = Instant::now();
    let mut clock = log::Clock::new(start);
    let mut epochs = Vec::with_capacity(cfg.epochs);

    let (genotype, arch) = match cfg.algorithm {
        Algorithm::Darts1 | Algorithm::Gdas => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut net = MicroNet::supernet(net_config(data, cfg), cfg.seed)?;
            let mut arch = ArchParams::random_init(&mut rng, cfg.arch_init);
            let mut opt = Sgd::new(cfg.lr_weights, cfg.momentum, cfg.grad_clip);
            let mut gumbel = GumbelSampler::new(cfg.seed.wrapping_add(1));
            for epoch in 0..cfg.epochs {
                let tb = shuffled_batches(&train, cfg.batch_size, &mut rng);
                let vb = shuffled_batches(&val, cfg.batch_size, &mut rng);
                let (mut tl, mut vl, mut tn, mut vn) = (0.0, 0.0, 0usize, 0usize);
                for (step, tidx) in tb.iter().enumerate() {
                    let vidx = &vb[step % vb.len()];
                    let tbatch = Batch::from_source(data, tidx)?;
                    let vbatch = Batch::from_source(data, vidx)?;
                    let lr_arch = if epoch < cfg.arch_warmup { 0.0 } else { cfg.lr_arch };
                    let losses = match cfg.algorithm {
                        Algorithm::Gdas => gdas_step(
                            &mut net,
                            &mut opt,
                            &mut arch,
                            &tbatch,
                            &vbatch,
                            cfg.tau(epoch),
                            lr_arch,
                            &mut gumbel,
                        )?,
                        _ => darts_step(&mut net, &mut opt, &mut arch, &tbatch, &vbatch, lr_arch)?,
                    };
                    check(losses.train, "train", epoch, step, &arch)?;
                    check(losses.val, "validation", epoch, step, &arch)?;
                    tl += losses.train * tbatch.len() as f64;
                    vl += losses.val * vbatch.len() as f64;
                    tn += tbatch.len();
                    vn += vbatch.len();
                }
                epochs.push(EpochRecord {
                    epoch,
                    logits: Some(arch),
                    genotype: derive_genotype(&arch),
                    train_loss: tl / tn as f64,
                    val_loss: vl / vn as f64,
                    wall_clock_ms: clock.tick(),
                });
            }
            (derive_genotype(&arch), arch)
        }
        Algorithm::Random => {
            let net_cfg = net_config(data, cfg);
            let tcfg = cfg.train_config();
            let mut candidate = 0usize;
            let result = random_search(cfg.random_budget, cfg.seed, |g| {
                let mut net = MicroNet::for_genotype(*g, net_cfg, cfg.seed)?;
                let hist = fit(&mut net, data, &train, &tcfg, cfg.seed)?;
                let (val_loss, _) = crate::nn::evaluate(&net, data, &val, 256)?;
                let train_loss = *hist.last().expect("at least one epoch");
                check(train_loss, "train", candidate, 0, &ArchParams::one_hot(g, 1.0))?;
                epochs.push(EpochRecord {
                    epoch: candidate,
                    logits: None,
                    genotype: *g,
                    train_loss,
                    val_loss,
                    wall_clock_ms: clock.tick(),
                });
                candidate += 1;
                Ok(if val_loss.is_finite() {
                    -val_loss
                } else {
                    f64::NEG_INFINITY
                })
            })?;
            (result.best, ArchParams::one_hot(&result.best, 1.0))
        }
        Algorithm::Darts2 => unreachable!("rejected by validate"),
    };

    let log = SearchLog {
        epochs,
        genotype,
        config: *cfg,
        provenance,
        total_ms: clock.total(),
    };
    Ok(SearchOutcome { genotype, arch, log })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_detection() {
        use OpKind::*;
        let all_skip = detect_degenerate(&Genotype::uniform(Skip));
        assert_eq!(
            all_skip,
            DegenerateReport {
                all_skip: true,
                zero_param: true
            }
        );
        let mix = Genotype([Skip, AvgPool3x3, Skip, AvgPool3x3, Zeroize, Skip]);
        assert_eq!(
            detect_degenerate(&mix),
            DegenerateReport {
                all_skip: false,
                zero_param: true
            }
        );
        let conv = Genotype([Skip, Skip, Conv1x1, Skip, Skip, Skip]);
        assert_eq!(
            detect_degenerate(&conv),
            DegenerateReport {
                all_skip: false,
                zero_param: false
            }
        );
    }

    #[test]
    fn config_validation() {
        let ok = SearchConfig::default();
        ok.validate().unwrap();
        for bad in [
            SearchConfig {
                algorithm: Algorithm::Darts2,
                ..ok
            },
            SearchConfig { tau_end: 0.0, ..ok },
            SearchConfig { tau_start: 0.05, ..ok },
            SearchConfig {
                split_fraction: 1.0,
                ..ok
            },
            SearchConfig {
                split_fraction: 0.0,
                ..ok
            },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
        assert!("darts3".parse::<Algorithm>().is_err());
        assert_eq!("gdas".parse::<Algorithm>().unwrap(), Algorithm::Gdas);
    }

    #[test]
    fn tau_schedule_is_linear() {
        let cfg = SearchConfig {
            epochs: 11,
            tau_start: 10.0,
            tau_end: 0.1,
            ..Default::default()
        };
        assert_eq!(cfg.tau(0), 10.0);
        assert!((cfg.tau(10) - 0.1).abs() < 1e-12);
        assert!((cfg.tau(5) - 5.05).abs() < 1e-12);
    }

    #[test]
    fn low_temperature_saturates() {
        let mut g = GumbelSampler::new(3);
        let arch = ArchParams::random_init(&mut ChaCha8Rng::seed_from_u64(1), 1.0);
        for _ in 0..100 {
            let noise = g.draw();
            for (logits, n) in arch.logits.iter().zip(&noise) {
                let s = soft_sample(logits, n, 1e-6);
                assert!(s.iter().copied().fold(0.0, f64::max) > 1.0 - 1e-6);
            }
        }
    }

    #[test]
    fn random_search_budget_and_ties() {
        let r = random_search(1, 5, |_| Ok(0.0)).unwrap();
        assert_eq!(r.evaluated.len(), 1);
        assert_eq!(r.best, r.evaluated[0].0);
        // constant scores: first candidate wins
        let r = random_search(20, 5, |_| Ok(1.0)).unwrap();
        assert_eq!(r.best, r.evaluated[0].0);
        // capped at the space size, every genotype exactly once
        let r = random_search(Genotype::SPACE_SIZE + 10, 1, |g| Ok(g.code() as f64)).unwrap();
        assert_eq!(r.evaluated.len(), Genotype::SPACE_SIZE);
        let mut codes: Vec<usize> = r.evaluated.iter().map(|(g, _)| g.code()).collect();
        codes.sort_unstable();
        codes.dedup();
        assert_eq!(codes.len(), Genotype::SPACE_SIZE);
        assert_eq!(r.best, Genotype::uniform(OpKind::Zeroize));
        assert!(random_search(0, 1, |_| Ok(0.0)).is_err());
    }
}
