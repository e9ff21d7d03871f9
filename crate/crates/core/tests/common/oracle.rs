//! Independent reference implementations used to check the library.

use nalgebra::{DMatrix, SymmetricEigen};
use proxyslice::data::{ImageShape, LabeledDataset, Sample, SampleSource};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Quota with the ratio given as an exact fraction `num / den`: total and
/// per-class counts in integer arithmetic only.
pub fn quota_oracle(class_sizes: &[usize], num: usize, den: usize) -> (usize, Vec<usize>) {
    let n: usize = class_sizes.iter().sum();
    let total = num * n / den;
    let mut per: Vec<usize> = class_sizes.iter().map(|&c| num * c / den).collect();
    // remainders as numerators over den
    let mut rem: Vec<(usize, usize)> = class_sizes
        .iter()
        .enumerate()
        .map(|(j, &c)| (num * c % den, j))
        .collect();
    rem.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let missing = total - per.iter().sum::<usize>();
    for &(_, j) in rem.iter().take(missing) {
        per[j] += 1;
    }
    (total, per)
}

/// The ratios under test as exact fractions.
pub const RATIOS: [(f64, usize, usize); 3] = [(0.25, 1, 4), (0.5, 1, 2), (0.75, 3, 4)];

/// Exhaustive minimum of `cost` over subsets of `0..n` of size `k` that pass
/// `feasible`. Returns the minimizing subset (first in mask order among
/// equal costs) and the gap to the runner-up.
pub fn brute_force_subset(
    n: usize,
    k: usize,
    cost: impl Fn(&[usize]) -> f64,
    feasible: impl Fn(&[usize]) -> bool,
) -> (Vec<usize>, f64, f64) {
    assert!(n <= 20, "exhaustive search over {n} items");
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut runner_up = f64::INFINITY;
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != k {
            continue;
        }
        let subset: Vec<usize> = (0..n).filter(|i| mask >> i & 1 == 1).collect();
        if !feasible(&subset) {
            continue;
        }
        let c = cost(&subset);
        match &best {
            Some((_, b)) if c >= *b => runner_up = runner_up.min(c),
            _ => {
                if let Some((_, b)) = &best {
                    runner_up = runner_up.min(*b);
                }
                best = Some((subset, c));
            }
        }
    }
    let (s, c) = best.expect("no feasible subset");
    (s, c, runner_up - c)
}

/// Random dataset with every class populated; pixels uniform in [0, 1].
pub fn random_dataset(rng: &mut ChaCha8Rng, n: usize, classes: usize, dim: usize) -> LabeledDataset {
    assert!(n >= classes);
    let mut labels: Vec<usize> = (0..n)
        .map(|i| if i < classes { i } else { rng.random_range(0..classes) })
        .collect();
    // shuffle so class members are not contiguous
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        labels.swap(i, j);
    }
    let samples = labels
        .into_iter()
        .map(|label| Sample {
            pixels: (0..dim).map(|_| rng.random::<f64>()).collect(),
            label,
        })
        .collect();
    LabeledDataset::new("oracle", ImageShape::new(1, dim, 1), samples, classes).unwrap()
}

/// Dataset with well separated principal variances, for eigenvector checks.
pub fn anisotropic_dataset(seed: u64, n: usize, dim: usize) -> LabeledDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // random orthogonal basis: Q factor of a random matrix
    let m = DMatrix::from_fn(dim, dim, |_, _| rng.random::<f64>() - 0.5);
    let q = m.qr().q();
    let samples = (0..n)
        .map(|_| {
            let mut x = vec![0.5; dim];
            for k in 0..dim {
                let scale = 0.12 * 0.7f64.powi(k as i32);
                let z = (rng.random::<f64>() - 0.5) * 2.0 * scale;
                for (d, xd) in x.iter_mut().enumerate() {
                    *xd += z * q[(d, k)];
                }
            }
            let pixels = x.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
            Sample { pixels, label: 0 }
        })
        .collect();
    LabeledDataset::new("aniso", ImageShape::new(1, dim, 1), samples, 1).unwrap()
}

/// Population covariance eigenpairs by a dense symmetric solver, sorted by
/// decreasing eigenvalue.
pub fn dense_pca(ds: &LabeledDataset) -> (Vec<f64>, Vec<f64>, Vec<Vec<f64>>) {
    let dim = ds.shape().len();
    let n = ds.samples().len();
    let x = DMatrix::from_fn(n, dim, |i, j| ds.samples()[i].pixels[j]);
    let mean: Vec<f64> = (0..dim).map(|j| x.column(j).mean()).collect();
    let mut c = x.clone();
    for (j, m) in mean.iter().enumerate() {
        c.column_mut(j).add_scalar_mut(-m);
    }
    let cov = c.transpose() * &c / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let vectors = order
        .iter()
        .map(|&k| eig.eigenvectors.column(k).iter().copied().collect())
        .collect();
    (mean, values, vectors)
}

/// Largest componentwise difference between two unit vectors up to sign.
pub fn sign_agnostic_diff(a: &[f64], b: &[f64]) -> f64 {
    let plus = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let minus = a.iter().zip(b).map(|(x, y)| (x + y).abs()).fold(0.0, f64::max);
    plus.min(minus)
}
