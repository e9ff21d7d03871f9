use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DataError, ImageShape, LabeledDataset, Result, Sample};

const PIXELS: usize = 32 * 32 * 3;

/// The two CIFAR binary layouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CifarFormat {
    /// `<label><3072 pixels>` records, 10 classes.
    Cifar10,
    /// `<coarse label><fine label><3072 pixels>` records, 100 fine classes.
    Cifar100,
}

impl CifarFormat {
    pub const fn record_size(self) -> usize {
        self.label_bytes() + PIXELS
    }

    const fn label_bytes(self) -> usize {
        match self {
            Self::Cifar10 => 1,
            Self::Cifar100 => 2,
        }
    }

    pub const fn classes(self) -> usize {
        match self {
            Self::Cifar10 => 10,
            Self::Cifar100 => 100,
        }
    }

    fn files(self, split: CifarSplit) -> Vec<&'static str> {
        match (self, split) {
            (Self::Cifar10, CifarSplit::Train) => vec![
                "data_batch_1.bin",
                "data_batch_2.bin",
                "data_batch_3.bin",
                "data_batch_4.bin",
                "data_batch_5.bin",
            ],
            (Self::Cifar10, CifarSplit::Test) => vec!["test_batch.bin"],
            (Self::Cifar100, CifarSplit::Train) => vec!["train.bin"],
            (Self::Cifar100, CifarSplit::Test) => vec!["test.bin"],
        }
    }

    fn subdir(self) -> &'static str {
        match self {
            Self::Cifar10 => "cifar-10-batches-bin",
            Self::Cifar100 => "cifar-100-binary",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CifarSplit {
    Train,
    Test,
}

/// Parses a CIFAR binary stream. Pixels are scaled to `[0, 1]`; for
/// CIFAR-100 the fine label becomes the class id and the coarse label is
/// dropped.
pub fn parse_cifar(bytes: &[u8], format: CifarFormat) -> Result<LabeledDataset> {
    let name = match format {
        CifarFormat::Cifar10 => "cifar10",
        CifarFormat::Cifar100 => "cifar100",
    };
    let samples = parse_records(bytes, format, 0)?;
    LabeledDataset::new(name, ImageShape::new(32, 32, 3), samples, format.classes())
}

fn parse_records(bytes: &[u8], format: CifarFormat, first_record: usize) -> Result<Vec<Sample>> {
    let size = format.record_size();
    if !bytes.len().is_multiple_of(size) {
        return Err(DataError::Truncated {
            offset: bytes.len() / size * size,
        });
    }
    bytes
        .chunks_exact(size)
        .enumerate()
        .map(|(i, rec)| {
            let label = rec[format.label_bytes() - 1] as usize;
            if label >= format.classes() {
                return Err(DataError::CorruptRecord {
                    record: first_record + i,
                    label,
                    classes: format.classes(),
                });
            }
            let pixels = rec[format.label_bytes()..]
                .iter()
                .map(|&b| f64::from(b) / 255.0)
                .collect();
            Ok(Sample { pixels, label })
        })
        .collect()
}

/// Loads the train or test split from a directory holding the official
/// binary distribution. Both the extracted archive directory
/// (`cifar-100-binary/`) and its parent are accepted.
pub fn load_cifar_dir(dir: &Path, format: CifarFormat, split: CifarSplit) -> Result<LabeledDataset> {
    let root = if dir.join(format.subdir()).is_dir() {
        dir.join(format.subdir())
    } else {
        dir.to_path_buf()
    };
    let mut samples = Vec::new();
    for file in format.files(split) {
        let bytes = fs::read(root.join(file))?;
        let more = parse_records(&bytes, format, samples.len())?;
        samples.extend(more);
    }
    let name = format!(
        "{}-{}",
        match format {
            CifarFormat::Cifar10 => "cifar10",
            CifarFormat::Cifar100 => "cifar100",
        },
        match split {
            CifarSplit::Train => "train",
            CifarSplit::Test => "test",
        }
    );
    LabeledDataset::new(name, ImageShape::new(32, 32, 3), samples, format.classes())
}
