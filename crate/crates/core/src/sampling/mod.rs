//! Proxy-dataset sampling.
//!
//! Every method returns a [`ProxyIndex`] whose size is fixed by [`Quota`]:
//! `floor(r * n)` samples overall, and for class-conditional methods a
//! per-class split by floor plus largest remainder. Ties in any ranking go to
//! the lower sample index.

mod kmeans;

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use kmeans::{kmeans_fit, kmeans_fit_points, nearest, KMeansModel, DEFAULT_MAX_ITERS, DEFAULT_TOL};

use crate::data::{DataError, LabeledDataset, Method, ProxyIndex, SampleSource};

#[derive(Debug, Error)]
pub enum SamplingError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("score {index} is not finite ({value})")]
    NonFiniteScore { index: usize, value: f64 },
    #[error(transparent)]
    Data(#[from] DataError),
}

pub type Result<T, E = SamplingError> = std::result::Result<T, E>;

// Absorbs representation error in products like 0.29 * 100.
const FLOOR_SLACK: f64 = 1e-9;

fn check_ratio(r: f64) -> Result<()> {
    if r > 0.0 && r <= 1.0 {
        Ok(())
    } else {
        Err(SamplingError::Argument(format!("ratio must lie in (0, 1], got {r}")))
    }
}

fn scaled_floor(r: f64, n: usize) -> usize {
    ((r * n as f64 + FLOOR_SLACK).floor() as usize).min(n)
}

/// Exact proxy cardinality for a ratio `r`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Quota {
    pub total: usize,
    /// Per class id, for class-conditional methods.
    pub per_class: Option<Vec<usize>>,
}

impl Quota {
    /// `floor(r * n)`.
    pub fn global(n: usize, r: f64) -> Result<Self> {
        check_ratio(r)?;
        Ok(Self {
            total: scaled_floor(r, n),
            per_class: None,
        })
    }

    /// The global total split over classes: each class gets `floor(r * n_j)`,
    /// and the units still missing go to the largest fractional remainders
    /// (ties to the lower class id).
    pub fn class_conditional(class_sizes: &[usize], r: f64) -> Result<Self> {
        check_ratio(r)?;
        let n: usize = class_sizes.iter().sum();
        let total = scaled_floor(r, n);
        let mut per_class: Vec<usize> = class_sizes.iter().map(|&c| scaled_floor(r, c)).collect();
        let assigned: usize = per_class.iter().sum();
        let mut order: Vec<usize> = (0..class_sizes.len()).collect();
        let remainder = |j: usize| (r * class_sizes[j] as f64 - per_class[j] as f64).max(0.0);
        let rems: Vec<f64> = order.iter().map(|&j| remainder(j)).collect();
        order.sort_by(|&a, &b| rems[b].total_cmp(&rems[a]).then(a.cmp(&b)));
        for &j in order.iter().take(total.saturating_sub(assigned)) {
            per_class[j] += 1;
        }
        debug_assert_eq!(per_class.iter().sum::<usize>(), total);
        Ok(Self {
            total,
            per_class: Some(per_class),
        })
    }

    pub fn for_dataset(ds: &LabeledDataset, r: f64, class_conditional: bool) -> Result<Self> {
        if class_conditional {
            let sizes: Vec<usize> = ds.class_index().iter().map(Vec::len).collect();
            Self::class_conditional(&sizes, r)
        } else {
            Self::global(ds.len(), r)
        }
    }
}

/// Where a score vector came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreOrigin {
    CentroidDistance,
    ReconstructionLoss,
    ClassifierLoss,
}

/// One finite score per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    scores: Vec<f64>,
    origin: ScoreOrigin,
}

impl ScoreVector {
    pub fn new(scores: Vec<f64>, origin: ScoreOrigin) -> Result<Self> {
        if let Some((index, &value)) = scores.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(SamplingError::NonFiniteScore { index, value });
        }
        Ok(Self { scores, origin })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn origin(&self) -> ScoreOrigin {
        self.origin
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Keep the smallest scores (easy samples).
    #[default]
    KeepLowest,
    /// Keep the largest scores (hard samples).
    KeepHighest,
}

impl std::str::FromStr for Direction {
    type Err = SamplingError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lowest" | "keep_lowest" => Ok(Self::KeepLowest),
            "highest" | "keep_highest" => Ok(Self::KeepHighest),
            _ => Err(SamplingError::Argument(format!(
                "unknown direction `{s}` (valid: lowest, highest)"
            ))),
        }
    }
}

/// The `k` entries of `candidates` that rank first under `direction`,
/// ties to the lower index. Expected linear time.
fn select_ranked(candidates: &mut [usize], scores: &[f64], k: usize, direction: Direction) -> Vec<usize> {
    if k == 0 {
        return Vec::new();
    }
    let cmp = |a: &usize, b: &usize| -> Ordering {
        let by_score = match direction {
            Direction::KeepLowest => scores[*a].total_cmp(&scores[*b]),
            Direction::KeepHighest => scores[*b].total_cmp(&scores[*a]),
        };
        by_score.then(a.cmp(b))
    };
    if k < candidates.len() {
        candidates.select_nth_unstable_by(k - 1, cmp);
    }
    let mut kept = candidates[..k.min(candidates.len())].to_vec();
    kept.sort_unstable();
    kept
}

fn partial_shuffle_pick(pool: &[usize], k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut pool = pool.to_vec();
    let n = pool.len();
    for i in 0..k.min(n) {
        let j = rng.random_range(i..n);
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}

fn class_lists(ds: &LabeledDataset) -> Result<&[Vec<usize>]> {
    if let Some(j) = ds.class_index().iter().position(Vec::is_empty) {
        return Err(SamplingError::Argument(format!(
            "class {j} has no samples; class-conditional sampling needs every class populated"
        )));
    }
    Ok(ds.class_index())
}

/// Uniform sampling without replacement (seeded partial Fisher-Yates).
pub fn sample_random(ds: &LabeledDataset, r: f64, seed: u64) -> Result<ProxyIndex> {
    let quota = Quota::global(ds.len(), r)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all: Vec<usize> = (0..ds.len()).collect();
    let picked = partial_shuffle_pick(&all, quota.total, &mut rng);
    Ok(ProxyIndex::new(
        picked,
        ds.len(),
        r,
        Method::Random,
        seed,
        ds.source_hash(),
    )?)
}

/// Uniform sampling without replacement inside every class, with per-class
/// counts from [`Quota::class_conditional`].
pub fn sample_cc_random(ds: &LabeledDataset, r: f64, seed: u64) -> Result<ProxyIndex> {
    check_ratio(r)?;
    let classes = class_lists(ds)?;
    let quota = Quota::for_dataset(ds, r, true)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = classes
        .iter()
        .zip(quota.per_class.as_deref().unwrap_or_default())
        .flat_map(|(members, &q)| partial_shuffle_pick(members, q, &mut rng))
        .collect();
    Ok(ProxyIndex::new(
        picked,
        ds.len(),
        r,
        Method::ClassRandom,
        seed,
        ds.source_hash(),
    )?)
}

/// Distance of every sample to its nearest centroid (Frobenius norm of the
/// difference of flattened images).
pub fn centroid_distances(ds: &LabeledDataset, centroids: &[Vec<f64>]) -> Result<ScoreVector> {
    if centroids.is_empty() {
        return Err(SamplingError::Argument("no centroids".into()));
    }
    let dim = ds.shape().len();
    if centroids.iter().any(|c| c.len() != dim) {
        return Err(SamplingError::Argument(format!(
            "centroid dimension does not match sample dimension {dim}"
        )));
    }
    let scores = ds
        .samples()
        .par_iter()
        .map(|s| nearest(&s.pixels, centroids).1.sqrt())
        .collect();
    ScoreVector::new(scores, ScoreOrigin::CentroidDistance)
}

/// K-means outlier removal: fit `k` clusters, then keep the `floor(r * n)`
/// samples closest to their nearest centroid.
pub fn sample_km_or(ds: &LabeledDataset, r: f64, k: usize, seed: u64) -> Result<ProxyIndex> {
    check_ratio(r)?;
    let model = kmeans_fit(ds, k, seed, DEFAULT_MAX_ITERS, DEFAULT_TOL)?;
    select_km_or(ds, &model.centroids, r).map(|p| p.with_seed(seed))
}

/// The selection half of KM-OR for already fitted centroids.
pub fn select_km_or(ds: &LabeledDataset, centroids: &[Vec<f64>], r: f64) -> Result<ProxyIndex> {
    let quota = Quota::global(ds.len(), r)?;
    let scores = centroid_distances(ds, centroids)?;
    let mut all: Vec<usize> = (0..ds.len()).collect();
    let kept = select_ranked(&mut all, scores.scores(), quota.total, Direction::KeepLowest);
    Ok(ProxyIndex::new(
        kept,
        ds.len(),
        r,
        Method::KMeansOutlier,
        0,
        ds.source_hash(),
    )?)
}

/// Class-conditional outlier removal: inside every class keep the quota of
/// samples closest to the class mean.
pub fn sample_cc_or(ds: &LabeledDataset, r: f64) -> Result<ProxyIndex> {
    check_ratio(r)?;
    let classes = class_lists(ds)?;
    let quota = Quota::for_dataset(ds, r, true)?;
    let dim = ds.shape().len();
    let mut distance = vec![0.0; ds.len()];
    for members in classes {
        let mut mean = vec![0.0; dim];
        for &i in members {
            mean.iter_mut().zip(&ds.samples()[i].pixels).for_each(|(m, p)| *m += p);
        }
        let count = members.len() as f64;
        mean.iter_mut().for_each(|m| *m /= count);
        let d: Vec<f64> = members
            .par_iter()
            .map(|&i| kmeans::sq_dist(&ds.samples()[i].pixels, &mean).sqrt())
            .collect();
        for (&i, d) in members.iter().zip(d) {
            distance[i] = d;
        }
    }
    let kept = classes
        .iter()
        .zip(quota.per_class.as_deref().unwrap_or_default())
        .flat_map(|(members, &q)| {
            let mut members = members.clone();
            select_ranked(&mut members, &distance, q, Direction::KeepLowest)
        })
        .collect();
    Ok(ProxyIndex::new(
        kept,
        ds.len(),
        r,
        Method::ClassOutlier,
        0,
        ds.source_hash(),
    )?)
}

/// Keeps the `floor(r * n)` lowest (or highest) scores. The proxy method is
/// derived from the score origin: reconstruction scores give `ae`/`ae-max`,
/// classifier scores `tl`/`tl-max`, centroid distances `km-or`.
pub fn sample_by_score(ds: &LabeledDataset, scores: &ScoreVector, r: f64, direction: Direction) -> Result<ProxyIndex> {
    if scores.len() != ds.len() {
        return Err(SamplingError::Argument(format!(
            "{} scores for {} samples",
            scores.len(),
            ds.len()
        )));
    }
    let quota = Quota::global(ds.len(), r)?;
    let method = match (scores.origin(), direction) {
        (ScoreOrigin::ReconstructionLoss, Direction::KeepLowest) => Method::Autoencoder,
        (ScoreOrigin::ReconstructionLoss, Direction::KeepHighest) => Method::AutoencoderHardest,
        (ScoreOrigin::ClassifierLoss, Direction::KeepLowest) => Method::Transfer,
        (ScoreOrigin::ClassifierLoss, Direction::KeepHighest) => Method::TransferHardest,
        (ScoreOrigin::CentroidDistance, _) => Method::KMeansOutlier,
    };
    let mut all: Vec<usize> = (0..ds.len()).collect();
    let kept = select_ranked(&mut all, scores.scores(), quota.total, direction);
    Ok(ProxyIndex::new(kept, ds.len(), r, method, 0, ds.source_hash())?)
}

/// Extra inputs some methods need.
#[derive(Debug, Clone, Copy, Default)]
pub struct MethodInputs<'a> {
    /// Cluster count for `km-or`; defaults to the number of classes.
    pub k: Option<usize>,
    /// Per-sample scores for `ae`, `ae-max`, `tl` and `tl-max`.
    pub scores: Option<&'a ScoreVector>,
}

/// Runs `method` at ratio `r`.
pub fn sample(ds: &LabeledDataset, method: Method, r: f64, seed: u64, inputs: MethodInputs<'_>) -> Result<ProxyIndex> {
    let by_score = |origin: ScoreOrigin, direction: Direction| -> Result<ProxyIndex> {
        let scores = inputs
            .scores
            .ok_or_else(|| SamplingError::Argument(format!("method {method} needs a score vector")))?;
        if scores.origin() != origin {
            return Err(SamplingError::Argument(format!(
                "method {method} needs {origin:?} scores, got {:?}",
                scores.origin()
            )));
        }
        Ok(sample_by_score(ds, scores, r, direction)?.with_seed(seed))
    };
    match method {
        Method::Random => sample_random(ds, r, seed),
        Method::ClassRandom => sample_cc_random(ds, r, seed),
        Method::KMeansOutlier => sample_km_or(ds, r, inputs.k.unwrap_or(ds.num_classes().max(1)), seed),
        Method::ClassOutlier => Ok(sample_cc_or(ds, r)?.with_seed(seed)),
        Method::Autoencoder => by_score(ScoreOrigin::ReconstructionLoss, Direction::KeepLowest),
        Method::AutoencoderHardest => by_score(ScoreOrigin::ReconstructionLoss, Direction::KeepHighest),
        Method::Transfer => by_score(ScoreOrigin::ClassifierLoss, Direction::KeepLowest),
        Method::TransferHardest => by_score(ScoreOrigin::ClassifierLoss, Direction::KeepHighest),
        Method::Full => {
            if r != 1.0 {
                return Err(SamplingError::Argument(format!("method full needs ratio 1, got {r}")));
            }
            Ok(ProxyIndex::full(ds).with_seed(seed))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_blobs, ImageShape, Sample};
    use proptest::prelude::*;

    fn line(points: &[f64], labels: &[usize], classes: usize) -> LabeledDataset {
        let samples = points
            .iter()
            .zip(labels)
            .map(|(&p, &label)| Sample { pixels: vec![p], label })
            .collect();
        LabeledDataset::new("line", ImageShape::new(1, 1, 1), samples, classes).unwrap()
    }

    fn scored(n: usize) -> LabeledDataset {
        line(&vec![0.5; n], &vec![0; n], 1)
    }

    #[test]
    fn quota_floors() {
        assert_eq!(Quota::global(50_000, 0.25).unwrap().total, 12_500);
        assert_eq!(Quota::global(100, 0.29).unwrap().total, 29);
        assert_eq!(Quota::global(3, 2.0 / 3.0).unwrap().total, 2);
        assert!(Quota::global(10, 0.0).is_err());
        assert!(Quota::global(10, 1.01).is_err());
    }

    #[test]
    fn largest_remainder_tie_goes_to_lower_class() {
        let q = Quota::class_conditional(&[3, 5], 0.5).unwrap();
        assert_eq!(q.total, 4);
        assert_eq!(q.per_class, Some(vec![2, 2]));
    }

    #[test]
    fn cifar_like_class_quota() {
        let q = Quota::class_conditional(&[500; 100], 0.5).unwrap();
        assert!(q.per_class.unwrap().iter().all(|&c| c == 250));
    }

    #[test]
    fn random_sampling_counts_and_identity() {
        let ds = synth_blobs(4, 25, 2, 0.1, 0).unwrap();
        let p = sample_random(&ds, 0.25, 3).unwrap();
        assert_eq!(p.len(), 25);
        assert_eq!(sample_random(&ds, 0.25, 3).unwrap(), p);
        let full = sample_random(&ds, 1.0, 3).unwrap();
        assert_eq!(full.indices(), (0..100).collect::<Vec<_>>().as_slice());
        assert!(sample_random(&ds, 0.0, 3).is_err());
    }

    #[test]
    fn cc_random_is_stratified() {
        let ds = synth_blobs(5, 12, 2, 0.1, 0).unwrap();
        let p = sample_cc_random(&ds, 0.5, 1).unwrap();
        let mask = p.indicator(ds.len());
        for class in ds.class_index() {
            assert_eq!(class.iter().filter(|&&i| mask[i]).count(), 6);
        }
        assert_eq!(sample_cc_random(&ds, 1.0, 1).unwrap().len(), 60);
    }

    #[test]
    fn km_or_drops_far_point() {
        let ds = line(&[0.0, 0.01, 0.02, 1.0], &[0; 4], 1);
        let p = sample_km_or(&ds, 0.75, 1, 0).unwrap();
        assert_eq!(p.indices(), &[0, 1, 2]);
        assert_eq!(p.method(), Method::KMeansOutlier);
        assert_eq!(sample_km_or(&ds, 1.0, 1, 0).unwrap().len(), 4);
    }

    #[test]
    fn cc_or_keeps_central_points() {
        let ds = line(&[0.0, 0.1, 0.2, 0.3], &[0; 4], 1);
        assert_eq!(sample_cc_or(&ds, 0.5).unwrap().indices(), &[1, 2]);
        assert_eq!(sample_cc_or(&ds, 1.0).unwrap().len(), 4);
        let gap = line(&[0.0, 0.1], &[0, 0], 2);
        assert!(sample_cc_or(&gap, 0.5).is_err());
    }

    #[test]
    fn score_selection_examples() {
        let ds = scored(4);
        let s = ScoreVector::new(vec![5.0, 1.0, 3.0, 2.0], ScoreOrigin::ReconstructionLoss).unwrap();
        let p = sample_by_score(&ds, &s, 0.5, Direction::KeepLowest).unwrap();
        assert_eq!(p.indices(), &[1, 3]);
        assert_eq!(p.method(), Method::Autoencoder);
        let p = sample_by_score(&ds, &s, 0.5, Direction::KeepHighest).unwrap();
        assert_eq!(p.indices(), &[0, 2]);
        assert_eq!(p.method(), Method::AutoencoderHardest);

        let ds = scored(3);
        let s = ScoreVector::new(vec![1.0, 1.0, 2.0], ScoreOrigin::ClassifierLoss).unwrap();
        let p = sample_by_score(&ds, &s, 2.0 / 3.0, Direction::KeepLowest).unwrap();
        assert_eq!(p.indices(), &[0, 1]);
        let s = ScoreVector::new(vec![2.0, 1.0, 2.0], ScoreOrigin::ClassifierLoss).unwrap();
        let p = sample_by_score(&ds, &s, 1.0 / 3.0, Direction::KeepHighest).unwrap();
        assert_eq!(p.indices(), &[0]);
    }

    #[test]
    fn non_finite_score_names_index() {
        match ScoreVector::new(vec![0.0, 1.0, f64::NAN], ScoreOrigin::ClassifierLoss) {
            Err(SamplingError::NonFiniteScore { index: 2, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn score_length_must_match() {
        let s = ScoreVector::new(vec![1.0, 2.0], ScoreOrigin::ClassifierLoss).unwrap();
        assert!(sample_by_score(&scored(3), &s, 0.5, Direction::KeepLowest).is_err());
    }

    proptest! {
        #[test]
        fn lowest_and_highest_halves_partition(
            scores in proptest::collection::hash_set(-1_000_000i64..1_000_000, 1..40),
        ) {
            let mut scores: Vec<f64> = scores.into_iter().map(|v| v as f64).collect();
            if scores.len() % 2 == 1 {
                scores.pop();
            }
            prop_assume!(!scores.is_empty());
            let n = scores.len();
            let ds = scored(n);
            let sv = ScoreVector::new(scores, ScoreOrigin::ClassifierLoss).unwrap();
            let lo = sample_by_score(&ds, &sv, 0.5, Direction::KeepLowest).unwrap();
            let hi = sample_by_score(&ds, &sv, 0.5, Direction::KeepHighest).unwrap();
            let mut all: Vec<usize> = lo.indices().iter().chain(hi.indices()).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }

        #[test]
        fn score_selection_is_monotone_in_ratio(
            scores in proptest::collection::vec(0u8..5, 1..50),
            a in 0.01f64..=1.0,
            b in 0.01f64..=1.0,
            highest: bool,
        ) {
            let (r1, r2) = if a <= b { (a, b) } else { (b, a) };
            let ds = scored(scores.len());
            let sv = ScoreVector::new(scores.iter().map(|&v| f64::from(v)).collect(), ScoreOrigin::ReconstructionLoss).unwrap();
            let dir = if highest { Direction::KeepHighest } else { Direction::KeepLowest };
            let small = sample_by_score(&ds, &sv, r1, dir).unwrap();
            let large = sample_by_score(&ds, &sv, r2, dir).unwrap();
            let mask = large.indicator(scores.len());
            prop_assert!(small.indices().iter().all(|&i| mask[i]));
        }

        #[test]
        fn class_quota_invariants(
            sizes in proptest::collection::vec(1usize..40, 1..12),
            r in 0.001f64..=1.0,
        ) {
            let q = Quota::class_conditional(&sizes, r).unwrap();
            let per = q.per_class.unwrap();
            prop_assert_eq!(per.iter().sum::<usize>(), q.total);
            prop_assert_eq!(q.total, Quota::global(sizes.iter().sum(), r).unwrap().total);
            for (&c, &p) in sizes.iter().zip(&per) {
                prop_assert!(p <= c);
                prop_assert!((p as f64 - r * c as f64).abs() < 1.0);
            }
        }
    }
}
