//! Labeled image datasets, dataset ingestion and proxy-index files.
//!
//! Pixels are stored channel-major (`c`, then `h`, then `w`), which is the
//! order CIFAR ships and the order the network engine consumes. Distances
//! between samples are computed on this flattened vector; the Frobenius norm
//! does not care about the ordering.

mod cifar;
mod proxy;
mod synth;

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use cifar::{load_cifar_dir, parse_cifar, CifarFormat, CifarSplit};
pub use proxy::{read_proxy, write_proxy, Method, ProxyIndex};
pub use synth::{synth_blobs, synth_patterns, PATTERN_CLASSES};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("truncated stream: incomplete record starting at byte offset {offset}")]
    Truncated { offset: usize },
    #[error("corrupt record {record}: label {label} is not below the class count {classes}")]
    CorruptRecord {
        record: usize,
        label: usize,
        classes: usize,
    },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("proxy file {path}: {reason}")]
    ProxyFormat { path: String, reason: String },
    #[error("proxy file {path}: header count {header} but {body} indices")]
    CountMismatch { path: String, header: usize, body: usize },
    #[error("proxy was drawn from dataset {expected} but the supplied dataset hashes to {actual}")]
    SourceMismatch { expected: String, actual: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

/// Spatial layout shared by every sample of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub const fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
        }
    }

    /// Length of the flattened pixel vector.
    pub const fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for ImageShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Channel-major pixels in `[0, 1]`.
    pub pixels: Vec<f64>,
    pub label: usize,
}

/// Read access to an ordered collection of samples.
///
/// Search and evaluation consume samples only through this trait, so a
/// proxy view (or an instrumented wrapper) can stand in for a full dataset.
pub trait SampleSource: Sync {
    fn len(&self) -> usize;
    fn shape(&self) -> ImageShape;
    /// Number of class ids (labels are in `0..num_classes()`).
    fn num_classes(&self) -> usize;
    fn sample(&self, index: usize) -> &Sample;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// An immutable in-memory image/label store with per-class index lists.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    name: String,
    shape: ImageShape,
    samples: Vec<Sample>,
    class_index: Vec<Vec<usize>>,
}

impl LabeledDataset {
    /// Builds a dataset, validating shapes, pixel range and labels.
    ///
    /// `num_classes` fixes the length of the class index; classes may be empty.
    pub fn new(name: impl Into<String>, shape: ImageShape, samples: Vec<Sample>, num_classes: usize) -> Result<Self> {
        if shape.is_empty() {
            return Err(DataError::Invalid("image shape has zero size".into()));
        }
        let mut class_index = vec![Vec::new(); num_classes];
        for (i, s) in samples.iter().enumerate() {
            if s.pixels.len() != shape.len() {
                return Err(DataError::Invalid(format!(
                    "sample {i} has {} pixels, expected {}",
                    s.pixels.len(),
                    shape.len()
                )));
            }
            if let Some(p) = s.pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
                return Err(DataError::Invalid(format!(
                    "sample {i} has pixel value {p} outside [0, 1]"
                )));
            }
            let Some(list) = class_index.get_mut(s.label) else {
                return Err(DataError::Invalid(format!(
                    "sample {i} has label {} but only {num_classes} classes",
                    s.label
                )));
            };
            list.push(i);
        }
        Ok(Self {
            name: name.into(),
            shape,
            samples,
            class_index,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    /// Sample indices of every class id, in increasing order.
    pub fn class_index(&self) -> &[Vec<usize>] {
        &self.class_index
    }

    /// Number of non-empty classes.
    pub fn occupied_classes(&self) -> usize {
        self.class_index.iter().filter(|c| !c.is_empty()).count()
    }

    pub fn labels(&self) -> impl Iterator<Item = usize> + '_ {
        self.samples.iter().map(|s| s.label)
    }

    /// Hex SHA-256 over the shape, labels and the bit patterns of all pixels.
    pub fn source_hash(&self) -> String {
        let mut h = Sha256::new();
        for dim in [self.shape.height, self.shape.width, self.shape.channels] {
            h.update((dim as u64).to_le_bytes());
        }
        h.update((self.class_index.len() as u64).to_le_bytes());
        h.update((self.samples.len() as u64).to_le_bytes());
        for s in &self.samples {
            h.update((s.label as u64).to_le_bytes());
            for p in &s.pixels {
                h.update(p.to_bits().to_le_bytes());
            }
        }
        hex_digest(h)
    }

    /// Copies the selected samples into a new dataset (class ids preserved).
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let samples = indices
            .iter()
            .map(|&i| {
                self.samples
                    .get(i)
                    .cloned()
                    .ok_or_else(|| DataError::Argument(format!("index {i} out of range for {}", self.len())))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(
            format!("{}[subset]", self.name),
            self.shape,
            samples,
            self.class_index.len(),
        )
    }

    /// Average-pools every image by an integer `factor` in both spatial
    /// dimensions (`32x32` CIFAR images become `8x8` with factor 4).
    pub fn downsample(&self, factor: usize) -> Result<Self> {
        let ImageShape {
            height,
            width,
            channels,
        } = self.shape;
        if factor == 0 || height % factor != 0 || width % factor != 0 {
            return Err(DataError::Argument(format!(
                "downsample factor {factor} does not divide {height}x{width}"
            )));
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let (oh, ow) = (height / factor, width / factor);
        let norm = (factor * factor) as f64;
        let samples = self
            .samples
            .iter()
            .map(|s| {
                let mut out = vec![0.0; channels * oh * ow];
                for c in 0..channels {
                    for y in 0..height {
                        for x in 0..width {
                            out[(c * oh + y / factor) * ow + x / factor] += s.pixels[(c * height + y) * width + x];
                        }
                    }
                }
                out.iter_mut().for_each(|v| *v = (*v / norm).clamp(0.0, 1.0));
                Sample {
                    pixels: out,
                    label: s.label,
                }
            })
            .collect();
        Self::new(
            self.name.clone(),
            ImageShape::new(oh, ow, channels),
            samples,
            self.class_index.len(),
        )
    }
}

impl SampleSource for LabeledDataset {
    fn len(&self) -> usize {
        self.samples.len()
    }

    fn shape(&self) -> ImageShape {
        self.shape
    }

    fn num_classes(&self) -> usize {
        self.class_index.len()
    }

    fn sample(&self, index: usize) -> &Sample {
        &self.samples[index]
    }
}

/// A read-only view of selected samples of another source.
#[derive(Debug, Clone)]
pub struct SubsetView<'a, S: ?Sized> {
    source: &'a S,
    indices: Vec<usize>,
}

impl<'a, S: SampleSource + ?Sized> SubsetView<'a, S> {
    pub fn new(source: &'a S, indices: Vec<usize>) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= source.len()) {
            return Err(DataError::Argument(format!(
                "index {bad} out of range for a source of {} samples",
                source.len()
            )));
        }
        Ok(Self { source, indices })
    }

    /// Positions in the underlying source, in view order.
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }
}

impl<S: SampleSource + ?Sized> SampleSource for SubsetView<'_, S> {
    fn len(&self) -> usize {
        self.indices.len()
    }

    fn shape(&self) -> ImageShape {
        self.source.shape()
    }

    fn num_classes(&self) -> usize {
        self.source.num_classes()
    }

    fn sample(&self, index: usize) -> &Sample {
        self.source.sample(self.indices[index])
    }
}

pub(crate) fn hex_digest(h: Sha256) -> String {
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Hex SHA-256 of raw bytes; used to chain artifact files together.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    hex_digest(h)
}
