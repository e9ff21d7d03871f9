use super::genotype::ArchParams;
use super::graph::Gradients;
use super::net::ParamStore;
use super::Tensor;

/// SGD with heavy-ball momentum and optional global-norm clipping.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub clip: Option<f64>,
    velocity: Vec<Option<Tensor>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, clip: Option<f64>) -> Self {
        Self {
            lr,
            momentum,
            clip,
            velocity: Vec::new(),
        }
    }

    /// Applies one update and returns the gradient norm before clipping.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> f64 {
        let norm = grads
            .params()
            .iter()
            .flatten()
            .flat_map(|t| t.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        let scale = match self.clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        if self.velocity.len() < params.len() {
            self.velocity.resize(params.len(), None);
        }
        for id in params.ids() {
            let Some(g) = grads.param(id) else { continue };
            let v = self.velocity[id.index()].get_or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let p = params.get_mut(id);
            for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = self.momentum * *vv + scale * gv;
                *pv -= self.lr * *vv;
            }
        }
        norm
    }
}

/// Plain gradient step on the architecture logits.
pub fn arch_step(arch: &mut ArchParams, grads: &Gradients, lr: f64) {
    for (row, g) in arch.logits.iter_mut().zip(&grads.arch) {
        row.iter_mut().zip(g).for_each(|(a, b)| *a -= lr * b);
    }
}
