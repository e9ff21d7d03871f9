use std::collections::BTreeSet;
use std::sync::Mutex;

use proxyslice::data::{ImageShape, LabeledDataset, Sample, SampleSource};

/// Records every index read through it.
pub struct Counting<'a> {
    inner: &'a LabeledDataset,
    seen: Mutex<BTreeSet<usize>>,
}

impl<'a> Counting<'a> {
    pub fn new(inner: &'a LabeledDataset) -> Self {
        Self {
            inner,
            seen: Mutex::new(BTreeSet::new()),
        }
    }

    pub fn seen(&self) -> BTreeSet<usize> {
        self.seen.lock().unwrap().clone()
    }
}

impl SampleSource for Counting<'_> {
    fn len(&self) -> usize {
        self.inner.len()
    }
    fn shape(&self) -> ImageShape {
        self.inner.shape()
    }
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }
    fn sample(&self, index: usize) -> &Sample {
        self.seen.lock().unwrap().insert(index);
        self.inner.sample(index)
    }
}
