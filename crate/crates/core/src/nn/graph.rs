//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records each operation as it is applied. Nodes are appended
//! in evaluation order, so [`Graph::backward`] only has to walk the tape in
//! reverse, accumulating adjoints into the operands of every node.

use std::borrow::Cow;

use super::kernels::{self, ConvDims};
use super::{NnError, ParamId, Result, Tensor, NUM_EDGES, NUM_OPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    /// Architecture logits of one cell edge.
    Arch(usize),
    Conv {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Relu(NodeId),
    AvgPool3(NodeId),
    Sum(Vec<NodeId>),
    /// `coef * x`, where `coef = weights[index]`, or exactly 1 with a
    /// straight-through gradient to `weights[index]`.
    Mix {
        x: NodeId,
        weights: NodeId,
        index: usize,
        straight_through: bool,
    },
    /// `softmax((x + offset) / temperature)` over a vector.
    Softmax {
        x: NodeId,
        temperature: f64,
    },
    GlobalAvgPool(NodeId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
}

/// Gradients collected by [`Graph::backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    params: Vec<Option<Tensor>>,
    /// One row per cell edge; zero where no architecture logits were used.
    pub arch: [[f64; NUM_OPS]; NUM_EDGES],
}

impl Gradients {
    /// Gradient of a parameter, or `None` if it did not take part in the
    /// forward pass.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(id.0).and_then(Option::as_ref)
    }

    pub(crate) fn params(&self) -> &[Option<Tensor>] {
        &self.params
    }

    /// Adds another gradient set into this one.
    pub fn accumulate(&mut self, other: &Gradients) {
        if self.params.len() < other.params.len() {
            self.params.resize(other.params.len(), None);
        }
        for (mine, theirs) in self.params.iter_mut().zip(&other.params) {
            match (mine.as_mut(), theirs) {
                (Some(m), Some(t)) => m.add_assign(t),
                (None, Some(t)) => *mine = Some(t.clone()),
                _ => {}
            }
        }
        for (m, t) in self.arch.iter_mut().zip(&other.arch) {
            m.iter_mut().zip(t).for_each(|(a, b)| *a += b);
        }
    }
}

/// A recorded forward computation.
#[derive(Debug, Default)]
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
    loss: Option<NodeId>,
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            loss: None,
        }
    }

    fn push(&mut self, value: Cow<'p, Tensor>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Every ReLU input value, flattened in tape order.
    pub fn relu_inputs(&self) -> Vec<f64> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(x),
                _ => None,
            })
            .flat_map(|x| self.value(x).data().iter().copied())
            .collect()
    }

    /// Recorded loss node, if any.
    pub fn loss(&self) -> Option<NodeId> {
        self.loss
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Cow::Owned(t), Op::Constant)
    }

    pub fn param(&mut self, id: ParamId, t: &'p Tensor) -> NodeId {
        self.push(Cow::Borrowed(t), Op::Param(id))
    }

    pub fn arch_logits(&mut self, edge: usize, logits: [f64; NUM_OPS]) -> NodeId {
        assert!(edge < NUM_EDGES, "edge index {edge} out of range");
        self.push(
            Cow::Owned(Tensor::new(vec![NUM_OPS], logits.to_vec()).expect("5 logits")),
            Op::Arch(edge),
        )
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let d = self.conv_dims(x, w, b)?;
        let out = kernels::conv2d_forward(&d, self.value(x).data(), self.value(w).data(), self.value(b).data());
        let shape = vec![d.batch, d.out_ch, d.height, d.width];
        Ok(self.push(Cow::Owned(Tensor::new(shape, out)?), Op::Conv { x, w, b }))
    }

    fn conv_dims(&self, x: NodeId, w: NodeId, b: NodeId) -> Result<ConvDims> {
        let [batch, in_ch, height, width] = self.value(x).dims4()?;
        let [out_ch, w_in, kh, kw] = self.value(w).dims4()?;
        if w_in != in_ch || kh != kw || kh % 2 == 0 || self.value(b).shape() != [out_ch] {
            return Err(NnError::Shape(format!(
                "conv weight {:?} / bias {:?} incompatible with input {:?}",
                self.value(w).shape(),
                self.value(b).shape(),
                self.value(x).shape()
            )));
        }
        Ok(ConvDims {
            batch,
            in_ch,
            out_ch,
            height,
            width,
            kernel: kh,
        })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| a.max(0.0)).collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        self.push(Cow::Owned(t), Op::Relu(x))
    }

    pub fn avg_pool3(&mut self, x: NodeId) -> Result<NodeId> {
        let [b, c, h, w] = self.value(x).dims4()?;
        let out = kernels::avg_pool3_forward(b * c, h, w, self.value(x).data());
        let t = Tensor::new(vec![b, c, h, w], out)?;
        Ok(self.push(Cow::Owned(t), Op::AvgPool3(x)))
    }

    pub fn sum(&mut self, terms: &[NodeId]) -> Result<NodeId> {
        let Some((&first, rest)) = terms.split_first() else {
            return Err(NnError::Shape("sum of no terms".into()));
        };
        let mut acc = self.value(first).clone();
        for &t in rest {
            if self.value(t).shape() != acc.shape() {
                return Err(NnError::Shape(format!(
                    "cannot add {:?} to {:?}",
                    self.value(t).shape(),
                    acc.shape()
                )));
            }
            acc.add_assign(self.value(t));
        }
        Ok(self.push(Cow::Owned(acc), Op::Sum(terms.to_vec())))
    }

    /// Scales `x` by `weights[index]`. With `straight_through` the forward
    /// value is `x` itself while the gradient still reaches `weights[index]`.
    pub fn mix(&mut self, x: NodeId, weights: NodeId, index: usize, straight_through: bool) -> NodeId {
        let coef = if straight_through {
            1.0
        } else {
            self.value(weights).data()[index]
        };
        let v = self.value(x);
        let data = v.data().iter().map(|a| coef * a).collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        self.push(
            Cow::Owned(t),
            Op::Mix {
                x,
                weights,
                index,
                straight_through,
            },
        )
    }

    /// `softmax((x + offset) / temperature)`; `offset` is a constant (for
    /// example Gumbel noise).
    pub fn softmax(&mut self, x: NodeId, offset: Option<&[f64]>, temperature: f64) -> NodeId {
        let v = self.value(x);
        let z: Vec<f64> = v
            .data()
            .iter()
            .enumerate()
            .map(|(i, a)| (a + offset.map_or(0.0, |o| o[i])) / temperature)
            .collect();
        let t = Tensor::new(v.shape().to_vec(), softmax(&z)).expect("same shape");
        self.push(Cow::Owned(t), Op::Softmax { x, temperature })
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let [b, c, h, w] = self.value(x).dims4()?;
        let plane = h * w;
        let data = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        let t = Tensor::new(vec![b, c], data)?;
        Ok(self.push(Cow::Owned(t), Op::GlobalAvgPool(x)))
    }

    /// `x W^T + b` for `x: [batch, in]`, `W: [out, in]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (&[batch, fin], &[fout, w_in]) = (xv.shape(), wv.shape()) else {
            return Err(NnError::Shape("linear expects rank-2 input and weight".into()));
        };
        if w_in != fin || bv.shape() != [fout] {
            return Err(NnError::Shape(format!(
                "linear weight {:?} incompatible with input {:?}",
                wv.shape(),
                xv.shape()
            )));
        }
        let mut out = vec![0.0; batch * fout];
        for r in 0..batch {
            let xr = &xv.data()[r * fin..][..fin];
            for o in 0..fout {
                let wr = &wv.data()[o * fin..][..fin];
                out[r * fout + o] = bv.data()[o] + xr.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        let t = Tensor::new(vec![batch, fout], out)?;
        Ok(self.push(Cow::Owned(t), Op::Linear { x, w, b }))
    }

    /// Mean softmax cross-entropy over the batch; becomes the loss node.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let v = self.value(logits);
        let &[batch, classes] = v.shape() else {
            return Err(NnError::Shape("cross-entropy expects [batch, classes] logits".into()));
        };
        if labels.len() != batch || labels.iter().any(|&l| l >= classes) {
            return Err(NnError::Shape(format!(
                "{} labels for a batch of {batch} over {classes} classes",
                labels.len()
            )));
        }
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = &v.data()[r * classes..][..classes];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            total += lse - row[label];
        }
        let id = self.push(
            Cow::Owned(Tensor::scalar(total / batch as f64)),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
        );
        self.loss = Some(id);
        Ok(id)
    }

    /// Back-propagates from the recorded loss.
    pub fn backward(&self) -> Result<Gradients> {
        let loss = self
            .loss
            .ok_or_else(|| NnError::Usage("backward called before a forward pass recorded a loss".into()))?;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = Gradients {
            params: Vec::new(),
            arch: [[0.0; NUM_OPS]; NUM_EDGES],
        };

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(pid) => {
                    if out.params.len() <= pid.0 {
                        out.params.resize(pid.0 + 1, None);
                    }
                    match &mut out.params[pid.0] {
                        Some(acc) => acc.add_assign(&g),
                        slot => *slot = Some(g),
                    }
                }
                Op::Arch(edge) => {
                    out.arch[*edge].iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
                }
                Op::Conv { x, w, b } => {
                    let d = self.conv_dims(*x, *w, *b)?;
                    let (gx, gw, gb) =
                        kernels::conv2d_backward(&d, self.value(*x).data(), self.value(*w).data(), g.data());
                    self.add_grad(&mut grads, *x, gx);
                    self.add_grad(&mut grads, *w, gw);
                    self.add_grad(&mut grads, *b, gb);
                }
                Op::Relu(x) => {
                    let gx = g
                        .data()
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(g, &a)| if a > 0.0 { *g } else { 0.0 })
                        .collect();
                    self.add_grad(&mut grads, *x, gx);
                }
                Op::AvgPool3(x) => {
                    let [b, c, h, w] = self.value(*x).dims4()?;
                    let gx = kernels::avg_pool3_backward(b * c, h, w, g.data());
                    self.add_grad(&mut grads, *x, gx);
                }
                Op::Sum(terms) => {
                    for &t in terms {
                        self.add_grad(&mut grads, t, g.data().to_vec());
                    }
                }
                Op::Mix {
                    x,
                    weights,
                    index,
                    straight_through,
                } => {
                    let coef = if *straight_through {
                        1.0
                    } else {
                        self.value(*weights).data()[*index]
                    };
                    let mut gw = vec![0.0; self.value(*weights).len()];
                    gw[*index] = g.dot(self.value(*x));
                    self.add_grad(&mut grads, *weights, gw);
                    self.add_grad(&mut grads, *x, g.data().iter().map(|v| coef * v).collect());
                }
                Op::Softmax { x, temperature } => {
                    let y = node.value.data();
                    let inner: f64 = g.data().iter().zip(y).map(|(a, b)| a * b).sum();
                    let gx = y
                        .iter()
                        .zip(g.data())
                        .map(|(yi, gi)| yi * (gi - inner) / temperature)
                        .collect();
                    self.add_grad(&mut grads, *x, gx);
                }
                Op::GlobalAvgPool(x) => {
                    let [_, _, h, w] = self.value(*x).dims4()?;
                    let plane = h * w;
                    let gx = g
                        .data()
                        .iter()
                        .flat_map(|v| std::iter::repeat_n(v / plane as f64, plane))
                        .collect();
                    self.add_grad(&mut grads, *x, gx);
                }
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (batch, fin) = (xv.shape()[0], xv.shape()[1]);
                    let fout = wv.shape()[0];
                    let mut gx = vec![0.0; batch * fin];
                    let mut gw = vec![0.0; fout * fin];
                    let mut gb = vec![0.0; fout];
                    for r in 0..batch {
                        for o in 0..fout {
                            let go = g.data()[r * fout + o];
                            gb[o] += go;
                            for i in 0..fin {
                                gx[r * fin + i] += go * wv.data()[o * fin + i];
                                gw[o * fin + i] += go * xv.data()[r * fin + i];
                            }
                        }
                    }
                    self.add_grad(&mut grads, *x, gx);
                    self.add_grad(&mut grads, *w, gw);
                    self.add_grad(&mut grads, *b, gb);
                }
                Op::CrossEntropy { logits, labels } => {
                    let v = self.value(*logits);
                    let classes = v.shape()[1];
                    let scale = g.data()[0] / labels.len() as f64;
                    let mut gl = vec![0.0; v.len()];
                    for (r, &label) in labels.iter().enumerate() {
                        let p = softmax(&v.data()[r * classes..][..classes]);
                        for (c, pc) in p.into_iter().enumerate() {
                            let target = if c == label { 1.0 } else { 0.0 };
                            gl[r * classes + c] = scale * (pc - target);
                        }
                    }
                    self.add_grad(&mut grads, *logits, gl);
                }
            }
        }
        Ok(out)
    }

    fn add_grad(&self, grads: &mut [Option<Tensor>], id: NodeId, g: Vec<f64>) {
        match &mut grads[id.0] {
            Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot => *slot = Some(Tensor::new(self.value(id).shape().to_vec(), g).expect("gradient shape")),
        }
    }
}

pub(crate) fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}
