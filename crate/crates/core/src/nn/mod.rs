//! Small reverse-mode engine over `f64` tensors, the five cell operations,
//! the 4-node cell and a stem/cells/classifier network around it.

pub mod checkpoint;
pub mod genotype;
pub mod graph;
mod kernels;
pub mod net;
pub mod optim;
pub mod tensor;
pub mod train;

use thiserror::Error;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use genotype::{ArchParams, Genotype, OpKind, EDGES};
pub use graph::{Gradients, Graph, NodeId};
pub use net::{
    op_forward, param_breakdown, param_count, Batch, CellMode, Layout, MicroNet, NetConfig, ParamBreakdown, ParamStore,
};
pub use optim::{arch_step, Sgd};
pub use tensor::Tensor;
pub use train::{evaluate, fit, TrainConfig};

pub const NUM_OPS: usize = 5;
pub const NUM_NODES: usize = 4;
pub const NUM_EDGES: usize = NUM_NODES * (NUM_NODES - 1) / 2;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("invalid genotype {0}")]
    Genotype(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NnError>;

/// Handle of a parameter tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn new(index: usize) -> Self {
        Self(index)
    }

    pub fn index(self) -> usize {
        self.0
    }
}
