//! Small synthetic datasets for tests, benchmarks and the desk-scale pipeline.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{DataError, ImageShape, LabeledDataset, Result, Sample};

/// Gaussian clusters, one per class, with class means drawn uniformly from
/// `[0.2, 0.8]^dim`. Pixels are clamped to `[0, 1]`; samples are `1 x dim x 1`
/// images with labels interleaved (`label = i % n_classes`).
pub fn synth_blobs(n_classes: usize, per_class: usize, dim: usize, spread: f64, seed: u64) -> Result<LabeledDataset> {
    if n_classes == 0 || per_class == 0 || dim == 0 {
        return Err(DataError::Argument(
            "synth_blobs needs at least one class, sample and dimension".into(),
        ));
    }
    if !(spread > 0.0 && spread.is_finite()) {
        return Err(DataError::Argument(format!("spread must be positive, got {spread}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<Vec<f64>> = (0..n_classes)
        .map(|_| (0..dim).map(|_| rng.random_range(0.2..0.8)).collect())
        .collect();
    let noise = Normal::new(0.0, spread).expect("spread validated above");
    let samples = (0..n_classes * per_class)
        .map(|i| {
            let label = i % n_classes;
            let pixels = means[label]
                .iter()
                .map(|m| (m + noise.sample(&mut rng)).clamp(0.0, 1.0))
                .collect();
            Sample { pixels, label }
        })
        .collect();
    LabeledDataset::new(
        format!("blobs-{n_classes}x{per_class}-d{dim}-s{seed}"),
        ImageShape::new(1, dim, 1),
        samples,
        n_classes,
    )
}

/// 3x3 stencils used by [`synth_patterns`], one per class.
pub const PATTERN_CLASSES: [[u8; 9]; 4] = [
    // corners
    [1, 0, 1, 0, 0, 0, 1, 0, 1],
    // edge midpoints
    [0, 1, 0, 1, 0, 1, 0, 1, 0],
    // main diagonal
    [1, 0, 0, 0, 1, 0, 0, 0, 1],
    // anti-diagonal
    [0, 0, 1, 0, 1, 0, 1, 0, 0],
];

/// Single-channel `side x side` images on a grey (0.5) background with one
/// class stencil stamped at a random interior position, either brightened or
/// darkened.
///
/// Samples come in pairs `x` and `1 - x`. Every class is therefore symmetric
/// under reflection through the grey image, and no affine function of the
/// pixels separates the classes: a zero-parameter cell (Skip, AvgPool,
/// Zeroize only) cannot push the cross-entropy below `ln(n_classes)`, while a
/// ReLU-then-convolution edge can detect the stencil regardless of sign.
pub fn synth_patterns(
    n_classes: usize,
    per_class: usize,
    side: usize,
    noise: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if !(1..=PATTERN_CLASSES.len()).contains(&n_classes) {
        return Err(DataError::Argument(format!(
            "synth_patterns supports 1..={} classes, got {n_classes}",
            PATTERN_CLASSES.len()
        )));
    }
    if per_class == 0 || !per_class.is_multiple_of(2) {
        return Err(DataError::Argument(format!(
            "per_class must be a positive even count, got {per_class}"
        )));
    }
    if side < 5 {
        return Err(DataError::Argument(format!("side must be at least 5, got {side}")));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(DataError::Argument(format!("invalid noise {noise}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n_classes * per_class);
    for _ in 0..per_class / 2 {
        for (label, stencil) in PATTERN_CLASSES.iter().enumerate().take(n_classes) {
            let cy = rng.random_range(2..side - 2);
            let cx = rng.random_range(2..side - 2);
            let mut offset = vec![0.0; side * side];
            if noise > 0.0 {
                let normal = Normal::new(0.0, noise).expect("noise validated above");
                offset.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
            }
            for dy in 0..3 {
                for dx in 0..3 {
                    if stencil[dy * 3 + dx] == 1 {
                        offset[(cy + dy - 1) * side + cx + dx - 1] += 0.45;
                    }
                }
            }
            for sign in [1.0, -1.0] {
                let pixels = offset.iter().map(|o| (0.5 + sign * o).clamp(0.0, 1.0)).collect();
                samples.push(Sample { pixels, label });
            }
        }
    }
    LabeledDataset::new(
        format!("patterns-{n_classes}x{per_class}-{side}px-s{seed}"),
        ImageShape::new(side, side, 1),
        samples,
        n_classes,
    )
}
