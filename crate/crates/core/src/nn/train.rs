use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::net::{Batch, MicroNet};
use super::optim::Sgd;
use super::{NnError, Result};
use crate::data::SampleSource;

/// Plain supervised training of a fixed-genotype network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub grad_clip: Option<f64>,
    /// Stop once an epoch's mean loss falls below this.
    pub target_loss: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            lr: 0.05,
            momentum: 0.9,
            grad_clip: Some(5.0),
            target_loss: None,
        }
    }
}

/// Mini-batches of `indices` in a seeded random order.
pub fn shuffled_batches(indices: &[usize], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order = indices.to_vec();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Trains `net` on `indices` of `data`; returns the mean loss of each epoch.
pub fn fit<S: SampleSource + ?Sized>(
    net: &mut MicroNet,
    data: &S,
    indices: &[usize],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    let genotype = match net.layout() {
        super::Layout::Fixed(g) => g,
        super::Layout::Supernet => return Err(NnError::Usage("fit needs a fixed-genotype network".into())),
    };
    if indices.is_empty() {
        return Err(NnError::Usage("no training samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, cfg.grad_clip);
    let mut history = Vec::with_capacity(cfg.epochs);
    // a single full batch never changes, so build it once
    let full = (cfg.batch_size >= indices.len())
        .then(|| Batch::from_source(data, indices))
        .transpose()?;
    for epoch in 0..cfg.epochs {
        let batches = match &full {
            Some(_) => vec![Vec::new()],
            None => shuffled_batches(indices, cfg.batch_size, &mut rng),
        };
        let mut total = 0.0;
        let mut seen = 0;
        for idx in &batches {
            let owned;
            let batch = match &full {
                Some(b) => b,
                None => {
                    owned = Batch::from_source(data, idx)?;
                    &owned
                }
            };
            let (loss, grads) = net.loss_and_grad(batch, super::CellMode::Discrete(&genotype))?;
            if !loss.is_finite() {
                return Err(NnError::NonFinite(format!("training loss at epoch {epoch}")));
            }
            opt.step(net.params_mut(), &grads);
            total += loss * batch.len() as f64;
            seen += batch.len();
        }
        let mean = total / seen as f64;
        history.push(mean);
        if cfg.target_loss.is_some_and(|t| mean < t) {
            break;
        }
    }
    Ok(history)
}

/// Mean loss and top-1 accuracy over `indices`, evaluated in chunks.
pub fn evaluate<S: SampleSource + ?Sized>(
    net: &MicroNet,
    data: &S,
    indices: &[usize],
    chunk: usize,
) -> Result<(f64, f64)> {
    let mode = net
        .default_mode()
        .ok_or_else(|| NnError::Usage("evaluate needs a fixed-genotype network".into()))?;
    if indices.is_empty() {
        return Err(NnError::Usage("no evaluation samples".into()));
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    for idx in indices.chunks(chunk.max(1)) {
        let batch = Batch::from_source(data, idx)?;
        loss += net.loss(&batch, mode)? * batch.len() as f64;
        let pred = net.predict(batch.x, mode)?;
        correct += pred.iter().zip(&batch.labels).filter(|(p, l)| p == l).count();
    }
    let n = indices.len() as f64;
    Ok((loss / n, correct as f64 / n))
}
