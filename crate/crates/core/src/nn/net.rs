use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::genotype::{ArchParams, Genotype, OpKind, EDGES};
use super::graph::{Gradients, Graph, NodeId};
use super::{NnError, ParamId, Result, Tensor, NUM_EDGES, NUM_NODES, NUM_OPS};
use crate::data::{ImageShape, SampleSource};

/// Subtracted from every pixel before the stem so that a flat mid-grey
/// image enters the network as zeros.
pub const INPUT_CENTER: f64 = 0.5;

/// Named parameter tensors in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Scalar count of the parameters whose name starts with `prefix`.
    pub fn count_prefixed(&self, prefix: &str) -> usize {
        self.names
            .iter()
            .zip(&self.tensors)
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub channels: usize,
    pub cells: usize,
    pub input: ImageShape,
    pub num_classes: usize,
}

/// Which cell parameters a network owns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// Every conv op on every edge, for relaxed or sampled search.
    Supernet,
    /// Only the convolutions of one genotype.
    Fixed(Genotype),
}

/// How a forward pass chooses the op on each edge.
#[derive(Debug, Clone, Copy)]
pub enum CellMode<'a> {
    Discrete(&'a Genotype),
    /// Softmax-weighted sum of all ops.
    Relaxed(&'a ArchParams),
    /// Straight-through hard sample of `softmax((logits + gumbel) / tau)`.
    Sampled {
        arch: &'a ArchParams,
        gumbel: &'a [[f64; NUM_OPS]; NUM_EDGES],
        tau: f64,
    },
}

#[derive(Debug, Clone, Copy, Default)]
struct EdgeParams {
    conv3: Option<(ParamId, ParamId)>,
    conv1: Option<(ParamId, ParamId)>,
}

impl EdgeParams {
    fn for_op(&self, op: OpKind) -> Option<(ParamId, ParamId)> {
        match op {
            OpKind::Conv3x3 => self.conv3,
            OpKind::Conv1x1 => self.conv1,
            _ => None,
        }
    }
}

/// Inputs and labels of one mini-batch, `b x c x h x w`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn from_source<S: SampleSource + ?Sized>(src: &S, indices: &[usize]) -> Result<Self> {
        let shape = src.shape();
        let mut data = Vec::with_capacity(indices.len() * shape.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = src.sample(i);
            data.extend_from_slice(&s.pixels);
            labels.push(s.label);
        }
        let x = Tensor::new(vec![indices.len(), shape.channels, shape.height, shape.width], data)?;
        Ok(Self { x, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Stem conv, `N` stacked cells and a pooled linear classifier.
#[derive(Debug, Clone)]
pub struct MicroNet {
    config: NetConfig,
    layout: Layout,
    params: ParamStore,
    stem: (ParamId, ParamId),
    edges: Vec<[EdgeParams; NUM_EDGES]>,
    head: (ParamId, ParamId),
}

fn kaiming(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| bound * (2.0 * rng.random::<f64>() - 1.0)).collect();
    Tensor::new(shape, data).expect("consistent shape")
}

impl MicroNet {
    pub fn new(config: NetConfig, layout: Layout, seed: u64) -> Result<Self> {
        let NetConfig {
            channels: c,
            cells,
            input,
            num_classes,
        } = config;
        if c == 0 || input.is_empty() || num_classes < 2 {
            return Err(NnError::Shape(format!("invalid network config {config:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::default();
        let conv = |params: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cin: usize, k: usize| {
            let w = params.push(format!("{name}.w"), kaiming(rng, vec![c, cin, k, k], cin * k * k));
            let b = params.push(format!("{name}.b"), Tensor::zeros(vec![c]));
            (w, b)
        };
        let stem = conv(&mut params, &mut rng, "stem", input.channels, 3);
        let mut edges = Vec::with_capacity(cells);
        for cell in 0..cells {
            let mut row = [EdgeParams::default(); NUM_EDGES];
            for (k, slot) in row.iter_mut().enumerate() {
                let (want3, want1) = match layout {
                    Layout::Supernet => (true, true),
                    Layout::Fixed(g) => (g.0[k] == OpKind::Conv3x3, g.0[k] == OpKind::Conv1x1),
                };
                if want3 {
                    slot.conv3 = Some(conv(
                        &mut params,
                        &mut rng,
                        &format!("cell{cell}.edge{}.conv3", k + 1),
                        c,
                        3,
                    ));
                }
                if want1 {
                    slot.conv1 = Some(conv(
                        &mut params,
                        &mut rng,
                        &format!("cell{cell}.edge{}.conv1", k + 1),
                        c,
                        1,
                    ));
                }
            }
            edges.push(row);
        }
        let hw = params.push("head.w", kaiming(&mut rng, vec![num_classes, c], c));
        let hb = params.push("head.b", Tensor::zeros(vec![num_classes]));
        Ok(Self {
            config,
            layout,
            params,
            stem,
            edges,
            head: (hw, hb),
        })
    }

    pub fn supernet(config: NetConfig, seed: u64) -> Result<Self> {
        Self::new(config, Layout::Supernet, seed)
    }

    pub fn for_genotype(genotype: Genotype, config: NetConfig, seed: u64) -> Result<Self> {
        Self::new(config, Layout::Fixed(genotype), seed)
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Replaces all parameter values; names and shapes must match.
    pub(crate) fn set_params(&mut self, store: ParamStore) -> Result<()> {
        if store.names != self.params.names
            || store
                .tensors
                .iter()
                .zip(&self.params.tensors)
                .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(NnError::Shape("parameter layout differs from the network".into()));
        }
        self.params = store;
        Ok(())
    }

    /// Scalar parameters owned by the cells.
    pub fn cell_param_count(&self) -> usize {
        self.params.count_prefixed("cell")
    }

    /// The mode a fixed-genotype net runs in by default.
    pub fn default_mode(&self) -> Option<CellMode<'_>> {
        match &self.layout {
            Layout::Fixed(g) => Some(CellMode::Discrete(g)),
            Layout::Supernet => None,
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let [_, c, h, w] = x.dims4()?;
        let s = self.config.input;
        if (c, h, w) != (s.channels, s.height, s.width) {
            return Err(NnError::Shape(format!(
                "input {:?} does not match network input {s}",
                x.shape()
            )));
        }
        Ok(())
    }

    /// Records the forward pass and returns the classifier logits node.
    pub fn forward<'p>(&'p self, g: &mut Graph<'p>, x: Tensor, mode: CellMode<'_>) -> Result<NodeId> {
        self.check_input(&x)?;
        let mut x = x;
        x.data_mut().iter_mut().for_each(|v| *v -= INPUT_CENTER);
        let x = g.constant(x);
        let (sw, sb) = self.stem;
        let (sw, sb) = (g.param(sw, self.params.get(sw)), g.param(sb, self.params.get(sb)));
        let mut h = g.conv2d(x, sw, sb)?;
        let weights = edge_weights(g, mode);
        for cell in 0..self.config.cells {
            h = self.cell(g, cell, h, mode, &weights)?;
        }
        let pooled = g.global_avg_pool(h)?;
        let (hw, hb) = self.head;
        let (hw, hb) = (g.param(hw, self.params.get(hw)), g.param(hb, self.params.get(hb)));
        g.linear(pooled, hw, hb)
    }

    fn apply_op<'p>(
        &'p self,
        g: &mut Graph<'p>,
        cell: usize,
        edge: usize,
        op: OpKind,
        src: NodeId,
        relu: &mut Option<NodeId>,
    ) -> Result<Option<NodeId>> {
        Ok(match op {
            OpKind::Zeroize => None,
            OpKind::Skip => Some(src),
            OpKind::AvgPool3x3 => Some(g.avg_pool3(src)?),
            OpKind::Conv3x3 | OpKind::Conv1x1 => {
                let (w, b) = self.edges[cell][edge].for_op(op).ok_or_else(|| {
                    NnError::Usage(format!("network has no parameters for {op} on edge {}", edge + 1))
                })?;
                let r = *relu.get_or_insert_with(|| g.relu(src));
                let (w, b) = (g.param(w, self.params.get(w)), g.param(b, self.params.get(b)));
                Some(g.conv2d(r, w, b)?)
            }
        })
    }

    fn cell<'p>(
        &'p self,
        g: &mut Graph<'p>,
        cell: usize,
        input: NodeId,
        mode: CellMode<'_>,
        weights: &[Option<NodeId>; NUM_EDGES],
    ) -> Result<NodeId> {
        let mut nodes = [input; NUM_NODES];
        let mut relus: [Option<NodeId>; NUM_NODES] = [None; NUM_NODES];
        for j in 1..NUM_NODES {
            let mut terms = Vec::new();
            for (k, &(from, to)) in EDGES.iter().enumerate() {
                if to != j {
                    continue;
                }
                let src = nodes[from];
                match mode {
                    CellMode::Discrete(genotype) => {
                        if let Some(t) = self.apply_op(g, cell, k, genotype.0[k], src, &mut relus[from])? {
                            terms.push(t);
                        }
                    }
                    CellMode::Relaxed(_) => {
                        let w = weights[k].expect("relaxed weights");
                        for op in OpKind::ALL {
                            if let Some(t) = self.apply_op(g, cell, k, op, src, &mut relus[from])? {
                                terms.push(g.mix(t, w, op.index(), false));
                            }
                        }
                    }
                    CellMode::Sampled { .. } => {
                        let w = weights[k].expect("sampled weights");
                        let soft = g.value(w).data();
                        let idx = (1..NUM_OPS).fold(0, |b, i| if soft[i] > soft[b] { i } else { b });
                        if let Some(t) = self.apply_op(g, cell, k, OpKind::ALL[idx], src, &mut relus[from])? {
                            terms.push(g.mix(t, w, idx, true));
                        }
                    }
                }
            }
            nodes[j] = match terms.as_slice() {
                [] => g.constant(Tensor::zeros(g.value(input).shape().to_vec())),
                [one] => *one,
                _ => g.sum(&terms)?,
            };
        }
        Ok(nodes[NUM_NODES - 1])
    }

    /// Output of cell `cell` for an input already at the cell width.
    pub fn cell_output(&self, cell: usize, x: &Tensor, mode: CellMode<'_>) -> Result<Tensor> {
        let [_, c, _, _] = x.dims4()?;
        if c != self.config.channels || cell >= self.config.cells {
            return Err(NnError::Shape(format!("cell {cell} cannot take input {:?}", x.shape())));
        }
        let mut g = Graph::new();
        let xi = g.constant(x.clone());
        let weights = edge_weights(&mut g, mode);
        let out = self.cell(&mut g, cell, xi, mode, &weights)?;
        Ok(g.value(out).clone())
    }

    /// Records forward pass and cross-entropy loss.
    pub fn loss_graph<'p>(&'p self, batch: &Batch, mode: CellMode<'_>) -> Result<Graph<'p>> {
        let mut g = Graph::new();
        let logits = self.forward(&mut g, batch.x.clone(), mode)?;
        g.cross_entropy(logits, &batch.labels)?;
        Ok(g)
    }

    pub fn loss(&self, batch: &Batch, mode: CellMode<'_>) -> Result<f64> {
        let g = self.loss_graph(batch, mode)?;
        Ok(g.value(g.loss().expect("loss recorded")).data()[0])
    }

    pub fn loss_and_grad(&self, batch: &Batch, mode: CellMode<'_>) -> Result<(f64, Gradients)> {
        let g = self.loss_graph(batch, mode)?;
        let loss = g.value(g.loss().expect("loss recorded")).data()[0];
        Ok((loss, g.backward()?))
    }

    pub fn logits(&self, x: Tensor, mode: CellMode<'_>) -> Result<Tensor> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, x, mode)?;
        Ok(g.value(out).clone())
    }

    /// Predicted class per sample; ties go to the lower class id.
    pub fn predict(&self, x: Tensor, mode: CellMode<'_>) -> Result<Vec<usize>> {
        let logits = self.logits(x, mode)?;
        let k = self.config.num_classes;
        Ok(logits
            .data()
            .chunks(k)
            .map(|row| (1..k).fold(0, |b, i| if row[i] > row[b] { i } else { b }))
            .collect())
    }
}

fn edge_weights(g: &mut Graph<'_>, mode: CellMode<'_>) -> [Option<NodeId>; NUM_EDGES] {
    let mut out = [None; NUM_EDGES];
    match mode {
        CellMode::Discrete(_) => {}
        CellMode::Relaxed(arch) => {
            for (k, slot) in out.iter_mut().enumerate() {
                let a = g.arch_logits(k, arch.logits[k]);
                *slot = Some(g.softmax(a, None, 1.0));
            }
        }
        CellMode::Sampled { arch, gumbel, tau } => {
            for (k, slot) in out.iter_mut().enumerate() {
                let a = g.arch_logits(k, arch.logits[k]);
                *slot = Some(g.softmax(a, Some(&gumbel[k]), tau));
            }
        }
    }
    out
}

/// Applies a single operation outside any network. Convolutions need
/// `(weight, bias)`; other ops ignore it.
pub fn op_forward(kind: OpKind, x: &Tensor, conv: Option<(&Tensor, &Tensor)>) -> Result<Tensor> {
    x.dims4()?;
    let mut g = Graph::new();
    let xi = g.constant(x.clone());
    let out = match kind {
        OpKind::Zeroize => return Ok(Tensor::zeros(x.shape().to_vec())),
        OpKind::Skip => return Ok(x.clone()),
        OpKind::AvgPool3x3 => g.avg_pool3(xi)?,
        OpKind::Conv3x3 | OpKind::Conv1x1 => {
            let (w, b) = conv.ok_or_else(|| NnError::Usage(format!("{kind} needs weights")))?;
            let k = kind.kernel().expect("conv");
            if w.shape().get(2..) != Some(&[k, k][..]) {
                return Err(NnError::Shape(format!("{kind} weight has shape {:?}", w.shape())));
            }
            let r = g.relu(xi);
            let w = g.constant(w.clone());
            let b = g.constant(b.clone());
            g.conv2d(r, w, b)?
        }
    };
    Ok(g.value(out).clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBreakdown {
    pub stem: usize,
    pub cells: usize,
    pub classifier: usize,
}

impl ParamBreakdown {
    pub fn total(&self) -> usize {
        self.stem + self.cells + self.classifier
    }
}

/// Learnable parameters in the cells of a `channels`-wide, `cells`-deep net.
/// The input shape only affects the stem, which is not counted here.
pub fn param_count(genotype: &Genotype, channels: usize, cells: usize, _input: ImageShape) -> usize {
    let per_cell: usize = genotype
        .ops()
        .iter()
        .filter_map(|op| op.kernel())
        .map(|k| channels * channels * k * k + channels)
        .sum();
    per_cell * cells
}

pub fn param_breakdown(genotype: &Genotype, config: &NetConfig) -> ParamBreakdown {
    let c = config.channels;
    ParamBreakdown {
        stem: c * config.input.channels * 9 + c,
        cells: param_count(genotype, c, config.cells, config.input),
        classifier: config.num_classes * c + config.num_classes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> NetConfig {
        NetConfig {
            channels: 3,
            cells: 2,
            input: ImageShape::new(5, 5, 2),
            num_classes: 3,
        }
    }

    fn batch(seed: u64, n: usize, shape: ImageShape) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = (0..n * shape.len()).map(|_| rng.random::<f64>()).collect();
        Batch {
            x: Tensor::new(vec![n, shape.channels, shape.height, shape.width], x).unwrap(),
            labels: (0..n).map(|i| i % 3).collect(),
        }
    }

    #[test]
    fn registry_matches_param_count() {
        use OpKind::*;
        for g in [
            Genotype::uniform(Skip),
            Genotype::uniform(Conv3x3),
            Genotype([Conv1x1, Skip, Zeroize, Conv3x3, AvgPool3x3, Conv1x1]),
        ] {
            let net = MicroNet::for_genotype(g, cfg(), 1).unwrap();
            assert_eq!(net.cell_param_count(), param_count(&g, 3, 2, cfg().input));
            assert_eq!(net.params().scalar_count(), param_breakdown(&g, &cfg()).total());
        }
    }

    #[test]
    fn shapes_are_preserved() {
        let net = MicroNet::supernet(cfg(), 2).unwrap();
        let x = batch(3, 2, ImageShape::new(5, 5, 3)).x;
        let arch = ArchParams::uniform();
        for mode in [
            CellMode::Relaxed(&arch),
            CellMode::Discrete(&Genotype::uniform(OpKind::Conv1x1)),
        ] {
            assert_eq!(net.cell_output(1, &x, mode).unwrap().shape(), x.shape());
        }
        for op in OpKind::ALL {
            let w = Tensor::full(vec![3, 3, 3, 3], 0.1);
            let w = if op == OpKind::Conv1x1 {
                Tensor::full(vec![3, 3, 1, 1], 0.1)
            } else {
                w
            };
            let b = Tensor::zeros(vec![3]);
            assert_eq!(op_forward(op, &x, Some((&w, &b))).unwrap().shape(), x.shape());
        }
    }

    #[test]
    fn missing_conv_params_are_a_usage_error() {
        let net = MicroNet::for_genotype(Genotype::uniform(OpKind::Skip), cfg(), 1).unwrap();
        let b = batch(0, 2, cfg().input);
        let other = Genotype::uniform(OpKind::Conv3x3);
        assert!(matches!(
            net.loss(&b, CellMode::Discrete(&other)),
            Err(NnError::Usage(_))
        ));
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let net = MicroNet::supernet(cfg(), 0).unwrap();
        let b = batch(0, 2, ImageShape::new(4, 5, 2));
        let g = Genotype::uniform(OpKind::Skip);
        assert!(matches!(net.loss(&b, CellMode::Discrete(&g)), Err(NnError::Shape(_))));
    }

    #[test]
    fn init_is_seeded() {
        let a = MicroNet::supernet(cfg(), 9).unwrap();
        let b = MicroNet::supernet(cfg(), 9).unwrap();
        let c = MicroNet::supernet(cfg(), 10).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }
}
