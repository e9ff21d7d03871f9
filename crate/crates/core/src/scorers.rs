//! Per-sample scores for the loss-based sampling methods.
//!
//! The reconstruction scorer is a linear autoencoder: the encoder projects a
//! centered sample onto the top principal directions, the decoder maps back,
//! and the score is the mean squared reconstruction error. Classifier losses
//! come from outside (a transfer-learned model) as a CSV file.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::data::{LabeledDataset, SampleSource};
use crate::sampling::{SamplingError, ScoreOrigin, ScoreVector};

#[derive(Debug, Error)]
pub enum ScorerError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("dataset dimension {actual} does not match scorer dimension {expected}")]
    Dimension { expected: usize, actual: usize },
    #[error("score file {path}: {reason}")]
    Format { path: String, reason: String },
    #[error("score file has no score for index {index}")]
    Missing { index: usize },
    #[error("score file lists index {index} more than once")]
    Duplicate { index: usize },
    #[error("score file covers index {index} but the dataset has {n} samples")]
    CountMismatch { index: usize, n: usize },
    #[error("score for index {index} is not finite")]
    NonFinite { index: usize },
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ScorerError> = std::result::Result<T, E>;

pub const DEFAULT_RANK: usize = 32;

/// Knobs for the randomized subspace iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerIterConfig {
    /// Extra basis vectors carried along to speed up convergence.
    pub oversample: usize,
    pub max_iters: usize,
    /// Stop once every Ritz residual `|Cv - lv|` is below `tol * l_max`.
    pub tol: f64,
}

impl Default for PowerIterConfig {
    fn default() -> Self {
        Self {
            oversample: 8,
            max_iters: 300,
            tol: 1e-11,
        }
    }
}

/// Rank-`k` linear autoencoder (PCA) fitted to a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionScorer {
    mean: Vec<f64>,
    /// Orthonormal rows, ordered by decreasing explained variance.
    components: Vec<Vec<f64>>,
    explained_variance: Vec<f64>,
    iterations: usize,
}

impl ReconstructionScorer {
    pub fn rank(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn components(&self) -> &[Vec<f64>] {
        &self.components
    }

    /// Variance along each component (eigenvalues of the population covariance).
    pub fn explained_variance(&self) -> &[f64] {
        &self.explained_variance
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    /// `D(E(x))`.
    pub fn reconstruct(&self, x: &[f64]) -> Vec<f64> {
        let centered: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        let mut out = self.mean.clone();
        for c in &self.components {
            let coeff = dot(c, &centered);
            out.iter_mut().zip(c).for_each(|(o, v)| *o += coeff * v);
        }
        out
    }

    /// Mean squared reconstruction error of one flattened sample.
    pub fn sample_score(&self, x: &[f64]) -> f64 {
        let mut residual: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        for c in &self.components {
            let coeff = dot(c, &residual);
            residual.iter_mut().zip(c).for_each(|(r, v)| *r -= coeff * v);
        }
        residual.iter().map(|r| r * r).sum::<f64>() / self.dim() as f64
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn fit_reconstruction(ds: &LabeledDataset, rank: usize, seed: u64) -> Result<ReconstructionScorer> {
    fit_reconstruction_with(ds, rank, seed, PowerIterConfig::default())
}

/// Centers the data and finds the top `rank` principal directions by
/// seeded randomized subspace iteration with Rayleigh-Ritz extraction.
pub fn fit_reconstruction_with(
    ds: &LabeledDataset,
    rank: usize,
    seed: u64,
    cfg: PowerIterConfig,
) -> Result<ReconstructionScorer> {
    let dim = ds.shape().len();
    if rank == 0 || rank > dim {
        return Err(ScorerError::Argument(format!("rank must lie in 1..={dim}, got {rank}")));
    }
    if ds.is_empty() {
        return Err(ScorerError::Argument("cannot fit on an empty dataset".into()));
    }
    let n = ds.len() as f64;
    let mut mean = vec![0.0; dim];
    for s in ds.samples() {
        mean.iter_mut().zip(&s.pixels).for_each(|(m, p)| *m += p);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let centered: Vec<Vec<f64>> = ds
        .samples()
        .iter()
        .map(|s| s.pixels.iter().zip(&mean).map(|(p, m)| p - m).collect())
        .collect();

    let block = (rank + cfg.oversample).min(dim);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut basis: Vec<Vec<f64>> = (0..block)
        .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    orthonormalize(&mut basis, &mut rng);

    let mut iterations = 0;
    loop {
        iterations += 1;
        let image = covariance_apply(&centered, &basis);
        // Rayleigh-Ritz on the current basis.
        let projected: Vec<Vec<f64>> = basis
            .iter()
            .map(|q| image.iter().map(|z| dot(q, z)).collect())
            .collect();
        let (values, vectors) = symmetric_eigen(projected);
        let lead = values[0].abs().max(f64::MIN_POSITIVE);
        let mut worst = 0.0f64;
        let mut ritz = Vec::with_capacity(rank);
        for (k, &lambda) in values.iter().enumerate().take(rank) {
            let v = combine(&basis, &vectors, k);
            let cv = combine(&image, &vectors, k);
            let res = cv
                .iter()
                .zip(&v)
                .map(|(a, b)| (a - lambda * b).powi(2))
                .sum::<f64>()
                .sqrt();
            worst = worst.max(res);
            ritz.push(v);
        }
        if worst <= cfg.tol * lead || iterations >= cfg.max_iters || block == dim {
            if worst > cfg.tol * lead && block < dim {
                log::warn!("subspace iteration stopped after {iterations} iterations with residual {worst:e}");
            }
            let mut components = ritz;
            orthonormalize(&mut components, &mut rng);
            return Ok(ReconstructionScorer {
                mean,
                components,
                explained_variance: values[..rank].iter().map(|v| v.max(0.0)).collect(),
                iterations,
            });
        }
        basis = image;
        orthonormalize(&mut basis, &mut rng);
    }
}

/// `C q` for every basis vector, with `C` the population covariance.
fn covariance_apply(centered: &[Vec<f64>], basis: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let dim = basis[0].len();
    let n = centered.len() as f64;
    let mut out = vec![vec![0.0; dim]; basis.len()];
    for x in centered {
        for (q, o) in basis.iter().zip(out.iter_mut()) {
            let t = dot(x, q) / n;
            o.iter_mut().zip(x).for_each(|(o, v)| *o += t * v);
        }
    }
    out
}

fn combine(rows: &[Vec<f64>], vectors: &[Vec<f64>], k: usize) -> Vec<f64> {
    let mut v = vec![0.0; rows[0].len()];
    for (row, coeffs) in rows.iter().zip(vectors) {
        let w = coeffs[k];
        v.iter_mut().zip(row).for_each(|(a, b)| *a += w * b);
    }
    v
}

/// Modified Gram-Schmidt, applied twice. Columns that collapse are replaced
/// by fresh random directions.
fn orthonormalize(rows: &mut [Vec<f64>], rng: &mut ChaCha8Rng) {
    for i in 0..rows.len() {
        for _attempt in 0..4 {
            let before = dot(&rows[i], &rows[i]).sqrt();
            for _ in 0..2 {
                for j in 0..i {
                    let (done, rest) = rows.split_at_mut(i);
                    let p = dot(&done[j], &rest[0]);
                    rest[0].iter_mut().zip(&done[j]).for_each(|(a, b)| *a -= p * b);
                }
            }
            let norm = dot(&rows[i], &rows[i]).sqrt();
            if norm > 1e-10 * before.max(f64::MIN_POSITIVE) && norm > 0.0 {
                rows[i].iter_mut().for_each(|a| *a /= norm);
                break;
            }
            let dim = rows[i].len();
            rows[i] = (0..dim).map(|_| StandardNormal.sample(&mut *rng)).collect();
        }
    }
}

/// Cyclic Jacobi eigensolver for a small symmetric matrix. Returns the
/// eigenvalues in decreasing order and the eigenvectors as columns
/// (`vectors[row][k]` belongs to eigenvalue `k`).
#[allow(clippy::needless_range_loop)]
fn symmetric_eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    // symmetrize away round-off from the projection
    for i in 0..n {
        for j in 0..i {
            let m = 0.5 * (a[i][j] + a[j][i]);
            a[i][j] = m;
            a[j][i] = m;
        }
    }
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        let scale: f64 = (0..n).map(|i| a[i][i] * a[i][i]).sum::<f64>().max(f64::MIN_POSITIVE);
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q] == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| a[y][y].total_cmp(&a[x][x]));
    let values = order.iter().map(|&k| a[k][k]).collect();
    let vectors = v.iter().map(|row| order.iter().map(|&k| row[k]).collect()).collect();
    (values, vectors)
}

/// Reconstruction MSE of every sample.
pub fn score(scorer: &ReconstructionScorer, ds: &LabeledDataset) -> Result<ScoreVector> {
    let dim = ds.shape().len();
    if dim != scorer.dim() {
        return Err(ScorerError::Dimension {
            expected: scorer.dim(),
            actual: dim,
        });
    }
    let scores = ds
        .samples()
        .par_iter()
        .map(|s| scorer.sample_score(&s.pixels))
        .collect();
    Ok(ScoreVector::new(scores, ScoreOrigin::ReconstructionLoss)?)
}

/// Per-sample losses produced by an external classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalScoreFile {
    /// File stem of the score file.
    pub model_id: String,
    /// Header name of the score column.
    pub loss_name: String,
    pub scores: Vec<f64>,
}

/// Reads an `index,<loss>` CSV covering the indices `0..n` exactly once.
pub fn read_score_file(path: &Path, n: usize) -> Result<ExternalScoreFile> {
    let shown = path.display().to_string();
    let fmt_err = |reason: String| ScorerError::Format {
        path: shown.clone(),
        reason,
    };
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| fmt_err(e.to_string()))?;
    let headers = reader.headers().map_err(|e| fmt_err(e.to_string()))?.clone();
    if headers.len() != 2 || &headers[0] != "index" {
        return Err(fmt_err(format!(
            "expected header `index,score`, found `{}`",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut scores: Vec<Option<f64>> = vec![None; n];
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| fmt_err(e.to_string()))?;
        let index: usize = record[0]
            .parse()
            .map_err(|_| fmt_err(format!("row {}: bad index `{}`", row + 2, &record[0])))?;
        let value: f64 = record[1]
            .parse()
            .map_err(|_| fmt_err(format!("row {}: bad score `{}`", row + 2, &record[1])))?;
        if !value.is_finite() {
            return Err(ScorerError::NonFinite { index });
        }
        let slot = scores.get_mut(index).ok_or(ScorerError::CountMismatch { index, n })?;
        if slot.replace(value).is_some() {
            return Err(ScorerError::Duplicate { index });
        }
    }
    let scores = scores
        .into_iter()
        .enumerate()
        .map(|(index, s)| s.ok_or(ScorerError::Missing { index }))
        .collect::<Result<Vec<_>>>()?;
    Ok(ExternalScoreFile {
        model_id: path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        loss_name: headers[1].to_string(),
        scores,
    })
}

/// Classifier-loss scores for `ds` from an external CSV file.
pub fn load_scores(path: &Path, ds: &LabeledDataset) -> Result<ScoreVector> {
    let file = read_score_file(path, ds.len())?;
    Ok(ScoreVector::new(file.scores, ScoreOrigin::ClassifierLoss)?)
}

/// Writes scores in the `index,score` format read by [`load_scores`].
pub fn write_scores(path: &Path, scores: &ScoreVector) -> Result<()> {
    let mut out = String::from("index,score\n");
    for (i, s) in scores.scores().iter().enumerate() {
        out.push_str(&format!("{i},{s:e}\n"));
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_blobs, ImageShape, Sample};

    fn points(rows: &[[f64; 2]]) -> LabeledDataset {
        let samples = rows
            .iter()
            .map(|p| Sample {
                pixels: p.to_vec(),
                label: 0,
            })
            .collect();
        LabeledDataset::new("pts", ImageShape::new(1, 2, 1), samples, 1).unwrap()
    }

    #[test]
    fn full_rank_reconstruction_is_exact() {
        let ds = synth_blobs(3, 10, 6, 0.2, 4).unwrap();
        let scorer = fit_reconstruction(&ds, 6, 1).unwrap();
        let s = score(&scorer, &ds).unwrap();
        assert!(s.scores().iter().all(|&v| v < 1e-10));
    }

    #[test]
    fn off_line_point_hand_computed() {
        // On-line points symmetric around the origin plus one point off the
        // line: in the rotated basis u = (x+y)/sqrt2, v = (x-y)/sqrt2 the
        // data has mean (0, sqrt2/6) and zero u-v covariance, so the first
        // component is u and the residual of a point is (v - sqrt2/6)^2.
        let ds = points(&[[0.1, 0.1], [0.3, 0.3], [0.5, 0.5], [0.7, 0.7], [0.9, 0.9], [0.6, 0.4]]);
        let scorer = fit_reconstruction(&ds, 1, 7).unwrap();
        let s = score(&scorer, &ds).unwrap();
        // same geometry, centered at (0.5, 0.5) and scaled by 0.1 in the
        // units where the off-line offset is (1, -1)
        let scale: f64 = 0.1 * 0.1;
        let off = 2.0 * (25.0 / 36.0) * scale / 2.0;
        let on = 2.0 * (1.0 / 36.0) * scale / 2.0;
        for i in 0..5 {
            assert!((s.scores()[i] - on).abs() < 1e-12, "{}", s.scores()[i]);
        }
        assert!((s.scores()[5] - off).abs() < 1e-12);

        // With a mirrored off-line pair the mean stays on the line: on-line
        // points reconstruct exactly and each off-line point has squared
        // perpendicular distance 2 (in offset units), i.e. MSE 1.
        let ds = points(&[[0.3, 0.3], [0.5, 0.5], [0.7, 0.7], [0.6, 0.4], [0.4, 0.6]]);
        let scorer = fit_reconstruction(&ds, 1, 7).unwrap();
        let s = score(&scorer, &ds).unwrap();
        for i in 0..3 {
            assert!(s.scores()[i] < 1e-12);
        }
        assert!((s.scores()[3] * 2.0 - 2.0 * scale).abs() < 1e-12);
        assert!((s.scores()[4] - 1.0 * scale).abs() < 1e-12);
    }

    #[test]
    fn mean_sample_scores_zero() {
        let ds = synth_blobs(2, 8, 5, 0.1, 2).unwrap();
        let scorer = fit_reconstruction(&ds, 2, 3).unwrap();
        assert!(scorer.sample_score(scorer.mean()) < 1e-20);
    }

    #[test]
    fn reconstructed_sample_is_fixed_point() {
        let ds = synth_blobs(3, 12, 10, 0.2, 5).unwrap();
        let scorer = fit_reconstruction(&ds, 3, 0).unwrap();
        for s in ds.samples() {
            let r = scorer.reconstruct(&s.pixels);
            assert!(scorer.sample_score(&r) < 1e-10);
        }
    }

    #[test]
    fn components_are_orthonormal() {
        let ds = synth_blobs(4, 20, 16, 0.3, 8).unwrap();
        let scorer = fit_reconstruction(&ds, 5, 2).unwrap();
        let c = scorer.components();
        for i in 0..c.len() {
            for j in 0..c.len() {
                let target = if i == j { 1.0 } else { 0.0 };
                assert!((dot(&c[i], &c[j]) - target).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn deterministic_for_seed() {
        let ds = synth_blobs(4, 20, 16, 0.3, 8).unwrap();
        assert_eq!(
            fit_reconstruction(&ds, 4, 11).unwrap(),
            fit_reconstruction(&ds, 4, 11).unwrap()
        );
    }

    #[test]
    fn rank_and_dimension_checks() {
        let ds = synth_blobs(2, 4, 3, 0.1, 0).unwrap();
        assert!(fit_reconstruction(&ds, 4, 0).is_err());
        assert!(fit_reconstruction(&ds, 0, 0).is_err());
        let scorer = fit_reconstruction(&ds, 2, 0).unwrap();
        let other = synth_blobs(2, 4, 5, 0.1, 0).unwrap();
        assert!(matches!(score(&scorer, &other), Err(ScorerError::Dimension { .. })));
    }

    #[test]
    fn scores_follow_dataset_permutation() {
        let ds = synth_blobs(3, 6, 4, 0.2, 1).unwrap();
        let scorer = fit_reconstruction(&ds, 2, 0).unwrap();
        let base = score(&scorer, &ds).unwrap();
        let perm: Vec<usize> = (0..ds.len()).rev().collect();
        let shuffled = score(&scorer, &ds.subset(&perm).unwrap()).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(shuffled.scores()[k], base.scores()[i]);
        }
    }

    fn csv(dir: &Path, body: &str) -> std::path::PathBuf {
        let p = dir.join("losses.csv");
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn score_file_errors() {
        let ds = synth_blobs(2, 2, 2, 0.1, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let ok = csv(dir.path(), "index,score\n0,1.5\n1,0.5\n3,2\n2,0\n");
        assert_eq!(load_scores(&ok, &ds).unwrap().scores(), &[1.5, 0.5, 0.0, 2.0]);

        let missing = csv(dir.path(), "index,score\n0,1\n1,1\n3,1\n");
        assert!(matches!(
            load_scores(&missing, &ds),
            Err(ScorerError::Missing { index: 2 })
        ));
        let dup = csv(dir.path(), "index,score\n0,1\n0,2\n1,1\n2,1\n3,1\n");
        assert!(matches!(
            load_scores(&dup, &ds),
            Err(ScorerError::Duplicate { index: 0 })
        ));
        let nan = csv(dir.path(), "index,score\n0,1\n1,NaN\n2,1\n3,1\n");
        assert!(matches!(
            load_scores(&nan, &ds),
            Err(ScorerError::NonFinite { index: 1 })
        ));
        let big = csv(dir.path(), "index,score\n0,1\n1,1\n2,1\n3,1\n4,1\n");
        assert!(matches!(
            load_scores(&big, &ds),
            Err(ScorerError::CountMismatch { index: 4, .. })
        ));
        let header = csv(dir.path(), "idx,score\n0,1\n");
        assert!(matches!(load_scores(&header, &ds), Err(ScorerError::Format { .. })));
    }

    #[test]
    fn score_file_round_trip() {
        let ds = synth_blobs(2, 5, 3, 0.1, 0).unwrap();
        let scorer = fit_reconstruction(&ds, 1, 0).unwrap();
        let s = score(&scorer, &ds).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        write_scores(&p, &s).unwrap();
        let back = read_score_file(&p, ds.len()).unwrap();
        assert_eq!(back.scores, s.scores());
        assert_eq!(back.model_id, "s");
        assert_eq!(back.loss_name, "score");
    }
}
