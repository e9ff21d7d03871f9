use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{DataError, LabeledDataset, Result};
use crate::data::SampleSource;

/// Sampling method that produced a proxy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "rs")]
    Random,
    #[serde(rename = "cc-rs")]
    ClassRandom,
    #[serde(rename = "km-or")]
    KMeansOutlier,
    #[serde(rename = "cc-or")]
    ClassOutlier,
    /// Reconstruction-loss selection keeping the easiest samples.
    #[serde(rename = "ae")]
    Autoencoder,
    /// Reconstruction-loss selection keeping the hardest samples.
    #[serde(rename = "ae-max")]
    AutoencoderHardest,
    /// Classifier-loss selection keeping the easiest samples.
    #[serde(rename = "tl")]
    Transfer,
    #[serde(rename = "tl-max")]
    TransferHardest,
    /// The unreduced dataset.
    #[serde(rename = "full")]
    Full,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::Random,
        Method::ClassRandom,
        Method::KMeansOutlier,
        Method::ClassOutlier,
        Method::Autoencoder,
        Method::AutoencoderHardest,
        Method::Transfer,
        Method::TransferHardest,
        Method::Full,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Method::Random => "rs",
            Method::ClassRandom => "cc-rs",
            Method::KMeansOutlier => "km-or",
            Method::ClassOutlier => "cc-or",
            Method::Autoencoder => "ae",
            Method::AutoencoderHardest => "ae-max",
            Method::Transfer => "tl",
            Method::TransferHardest => "tl-max",
            Method::Full => "full",
        }
    }

    pub fn is_class_conditional(self) -> bool {
        matches!(self, Method::ClassRandom | Method::ClassOutlier)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Method {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL.into_iter().find(|m| m.tag() == s).ok_or_else(|| {
            let valid: Vec<_> = Method::ALL.iter().map(|m| m.tag()).collect();
            DataError::Argument(format!("unknown method `{s}` (valid: {})", valid.join(", ")))
        })
    }
}

/// A sorted subset of dataset indices plus the provenance of its selection.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxyIndex {
    indices: Vec<usize>,
    ratio: f64,
    method: Method,
    seed: u64,
    source_hash: String,
}

impl ProxyIndex {
    /// Sorts `indices` and checks they are unique and below `n_samples`.
    pub fn new(
        mut indices: Vec<usize>,
        n_samples: usize,
        ratio: f64,
        method: Method,
        seed: u64,
        source_hash: impl Into<String>,
    ) -> Result<Self> {
        if !(ratio > 0.0 && ratio <= 1.0) {
            return Err(DataError::Argument(format!("ratio must lie in (0, 1], got {ratio}")));
        }
        indices.sort_unstable();
        if let Some(w) = indices.windows(2).find(|w| w[0] == w[1]) {
            return Err(DataError::Argument(format!("duplicate index {}", w[0])));
        }
        if let Some(&last) = indices.last() {
            if last >= n_samples {
                return Err(DataError::Argument(format!(
                    "index {last} out of range for {n_samples} samples"
                )));
            }
        }
        Ok(Self {
            indices,
            ratio,
            method,
            seed,
            source_hash: source_hash.into(),
        })
    }

    /// The identity proxy (`r = 1`).
    pub fn full(ds: &LabeledDataset) -> Self {
        Self {
            indices: (0..ds.len()).collect(),
            ratio: 1.0,
            method: Method::Full,
            seed: 0,
            source_hash: ds.source_hash(),
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn source_hash(&self) -> &str {
        &self.source_hash
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Membership indicator over `n` samples.
    pub fn indicator(&self, n: usize) -> Vec<bool> {
        let mut mask = vec![false; n];
        for &i in &self.indices {
            mask[i] = true;
        }
        mask
    }

    /// Renders the on-disk form: one JSON header line, then one index per line.
    pub fn to_file_string(&self) -> String {
        let header = Header {
            method: self.method,
            ratio: self.ratio,
            seed: self.seed,
            source_hash: self.source_hash.clone(),
            count: self.indices.len(),
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for i in &self.indices {
            out.push_str(&i.to_string());
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    method: Method,
    ratio: f64,
    seed: u64,
    source_hash: String,
    count: usize,
}

pub fn write_proxy(path: &Path, proxy: &ProxyIndex) -> Result<()> {
    let mut file = fs::File::create(path)?;
    file.write_all(proxy.to_file_string().as_bytes())?;
    Ok(())
}

/// Reads a proxy file. When `dataset` is given, the recorded source hash must
/// match it and every index must be in range.
pub fn read_proxy(path: &Path, dataset: Option<&LabeledDataset>) -> Result<ProxyIndex> {
    let text = fs::read_to_string(path)?;
    let shown = path.display().to_string();
    let fmt_err = |reason: String| DataError::ProxyFormat {
        path: shown.clone(),
        reason,
    };
    let mut lines = text.lines();
    let header: Header =
        serde_json::from_str(lines.next().unwrap_or_default()).map_err(|e| fmt_err(format!("bad header: {e}")))?;
    let mut indices = Vec::with_capacity(header.count);
    for (n, line) in lines.enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let idx: usize = line
            .parse()
            .map_err(|_| fmt_err(format!("line {}: `{line}` is not an index", n + 2)))?;
        if let Some(&prev) = indices.last() {
            if idx <= prev {
                return Err(fmt_err(format!(
                    "line {}: index {idx} is not above the previous index {prev}",
                    n + 2
                )));
            }
        }
        indices.push(idx);
    }
    if indices.len() != header.count {
        return Err(DataError::CountMismatch {
            path: shown,
            header: header.count,
            body: indices.len(),
        });
    }
    let n = match dataset {
        Some(ds) => {
            let actual = ds.source_hash();
            if actual != header.source_hash {
                return Err(DataError::SourceMismatch {
                    expected: header.source_hash,
                    actual,
                });
            }
            ds.len()
        }
        None => usize::MAX,
    };
    ProxyIndex::new(indices, n, header.ratio, header.method, header.seed, header.source_hash)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_blobs;
    use proptest::prelude::*;

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn count_mismatch_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let body: String = (0..9).map(|i| format!("{i}\n")).collect();
        let p = write(
            dir.path(),
            "p.json",
            &format!("{{\"method\":\"rs\",\"ratio\":0.5,\"seed\":1,\"source_hash\":\"ab\",\"count\":10}}\n{body}"),
        );
        assert!(matches!(
            read_proxy(&p, None),
            Err(DataError::CountMismatch {
                header: 10,
                body: 9,
                ..
            })
        ));
    }

    #[test]
    fn unsorted_body_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "p.json",
            "{\"method\":\"rs\",\"ratio\":0.5,\"seed\":1,\"source_hash\":\"ab\",\"count\":3}\n0\n5\n2\n",
        );
        assert!(matches!(read_proxy(&p, None), Err(DataError::ProxyFormat { .. })));
    }

    #[test]
    fn source_hash_checked_against_dataset() {
        let ds = synth_blobs(2, 4, 3, 0.1, 1).unwrap();
        let other = synth_blobs(2, 4, 3, 0.1, 2).unwrap();
        let proxy = ProxyIndex::new(vec![3, 1], 8, 0.25, Method::Random, 5, ds.source_hash()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("proxy.json");
        write_proxy(&p, &proxy).unwrap();
        assert_eq!(read_proxy(&p, Some(&ds)).unwrap(), proxy);
        assert!(matches!(
            read_proxy(&p, Some(&other)),
            Err(DataError::SourceMismatch { .. })
        ));
    }

    #[test]
    fn new_rejects_duplicates_and_bad_ratio() {
        assert!(ProxyIndex::new(vec![1, 1], 4, 0.5, Method::Random, 0, "h").is_err());
        assert!(ProxyIndex::new(vec![4], 4, 0.5, Method::Random, 0, "h").is_err());
        assert!(ProxyIndex::new(vec![0], 4, 0.0, Method::Random, 0, "h").is_err());
        assert!(ProxyIndex::new(vec![0], 4, 1.5, Method::Random, 0, "h").is_err());
    }

    #[test]
    fn method_tags_parse() {
        for m in Method::ALL {
            assert_eq!(m.tag().parse::<Method>().unwrap(), m);
        }
        let err = "bogus".parse::<Method>().unwrap_err().to_string();
        assert!(err.contains("cc-or"));
    }

    proptest! {
        #[test]
        fn file_round_trip(
            set in proptest::collection::btree_set(0usize..500, 0..60),
            ratio in 0.001f64..=1.0,
            seed: u64,
            m in 0usize..9,
        ) {
            let proxy = ProxyIndex::new(
                set.into_iter().collect(), 500, ratio, Method::ALL[m], seed, "cafe",
            ).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("x.json");
            write_proxy(&p, &proxy).unwrap();
            prop_assert_eq!(read_proxy(&p, None).unwrap(), proxy);
        }
    }
}
