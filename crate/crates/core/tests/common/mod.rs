//! Helpers shared by the integration test targets.
#![allow(dead_code)]

mod counting;
pub mod oracle;

#[allow(unused_imports)]
pub use counting::Counting;

use proxyslice::data::ImageShape;
use proxyslice::nn::{ArchParams, Batch, CellMode, Genotype, Graph, MicroNet, NetConfig, OpKind, ParamId, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
/// Denominator floor: below this, gradients are compared absolutely.
pub const FD_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

#[derive(Debug, Default, Clone)]
pub struct FdReport {
    pub checked: usize,
    /// Coordinates whose perturbation moved some ReLU across its kink.
    pub skipped: usize,
    pub max_rel: f64,
    pub worst: String,
}

impl FdReport {
    pub fn record(&mut self, what: String, analytic: f64, numeric: f64) {
        let r = rel_err(analytic, numeric);
        self.checked += 1;
        if r > self.max_rel || self.worst.is_empty() {
            self.max_rel = r;
            self.worst = format!("{what}: analytic {analytic:e}, numeric {numeric:e}");
        }
    }

    pub fn merge(&mut self, o: &FdReport) {
        self.checked += o.checked;
        self.skipped += o.skipped;
        if o.max_rel > self.max_rel {
            self.max_rel = o.max_rel;
            self.worst = o.worst.clone();
        }
    }

    pub fn ok(&self) -> bool {
        self.max_rel < FD_TOL && self.skipped * 20 <= self.checked.max(1)
    }
}

#[derive(Debug, Clone, Copy)]
pub enum ModeSpec {
    Discrete(Genotype),
    Relaxed,
}

fn eval(net: &MicroNet, batch: &Batch, spec: ModeSpec, arch: &ArchParams) -> (f64, Vec<f64>) {
    let mode = match &spec {
        ModeSpec::Discrete(g) => CellMode::Discrete(g),
        ModeSpec::Relaxed => CellMode::Relaxed(arch),
    };
    let g = net.loss_graph(batch, mode).unwrap();
    (g.value(g.loss().unwrap()).data()[0], g.relu_inputs())
}

/// Central differences on up to `per_tensor` random coordinates of every
/// parameter tensor and, in relaxed mode, on every architecture logit.
/// Central difference of `f` at 0, shrinking the step while either probe
/// flips a ReLU relative to `base`. `None` if every step crosses a kink.
fn central_diff(base: &[f64], mut f: impl FnMut(f64) -> (f64, Vec<f64>)) -> Option<f64> {
    [FD_EPS, FD_EPS / 10.0, FD_EPS / 100.0].into_iter().find_map(|h| {
        let (lp, pp) = f(h);
        let (lm, pm) = f(-h);
        (!crosses_kink(base, &pp) && !crosses_kink(base, &pm)).then(|| (lp - lm) / (2.0 * h))
    })
}

/// Band around zero treated as sitting on the kink, wide enough to absorb
/// round-off.
const KINK_FLOOR: f64 = 1e-10;

fn side(v: f64) -> i8 {
    if v > KINK_FLOOR {
        1
    } else if v < -KINK_FLOOR {
        -1
    } else {
        0
    }
}

/// True if some ReLU input moved onto, off or across its kink.
pub fn crosses_kink(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b).any(|(&x, &y)| side(x) != side(y))
}

pub fn fd_check_net(
    net: &mut MicroNet,
    batch: &Batch,
    spec: ModeSpec,
    arch: &mut ArchParams,
    per_tensor: usize,
    rng: &mut ChaCha8Rng,
) -> FdReport {
    let (grads, base_pattern) = {
        let mode = match &spec {
            ModeSpec::Discrete(g) => CellMode::Discrete(g),
            ModeSpec::Relaxed => CellMode::Relaxed(arch),
        };
        let g = net.loss_graph(batch, mode).unwrap();
        (g.backward().unwrap(), g.relu_inputs())
    };
    let mut rep = FdReport::default();
    let ids: Vec<ParamId> = net.params().ids().collect();
    for id in ids {
        let len = net.params().get(id).len();
        let coords: Vec<usize> = if len <= per_tensor {
            (0..len).collect()
        } else {
            (0..per_tensor).map(|_| rng.random_range(0..len)).collect()
        };
        let name = net.params().name(id).to_string();
        for i in coords {
            let analytic = grads.param(id).map_or(0.0, |t| t.data()[i]);
            let orig = net.params().get(id).data()[i];
            let numeric = central_diff(&base_pattern, |h| {
                net.params_mut().get_mut(id).data_mut()[i] = orig + h;
                let out = eval(net, batch, spec, arch);
                net.params_mut().get_mut(id).data_mut()[i] = orig;
                out
            });
            match numeric {
                Some(n) => rep.record(format!("{name}[{i}]"), analytic, n),
                None => rep.skipped += 1,
            }
        }
    }
    if matches!(spec, ModeSpec::Relaxed) {
        for e in 0..6 {
            for o in 0..5 {
                let orig = arch.logits[e][o];
                let numeric = central_diff(&base_pattern, |h| {
                    arch.logits[e][o] = orig + h;
                    let out = eval(net, batch, spec, arch);
                    arch.logits[e][o] = orig;
                    out
                });
                match numeric {
                    Some(n) => rep.record(format!("logit[{e}][{o}]"), grads.arch[e][o], n),
                    None => rep.skipped += 1,
                }
            }
        }
    }
    rep
}

pub fn random_batch(rng: &mut ChaCha8Rng, n: usize, shape: ImageShape, classes: usize) -> Batch {
    let x = (0..n * shape.len()).map(|_| rng.random::<f64>()).collect();
    Batch {
        x: Tensor::new(vec![n, shape.channels, shape.height, shape.width], x).unwrap(),
        labels: (0..n).map(|_| rng.random_range(0..classes)).collect(),
    }
}

pub fn random_genotype(rng: &mut ChaCha8Rng) -> Genotype {
    Genotype::from_code(rng.random_range(0..Genotype::SPACE_SIZE)).unwrap()
}

/// Biases start at zero, which parks every ReLU fed by an all-dead pixel
/// exactly on its kink. Finite differences need a generic point.
pub fn jitter_biases(net: &mut MicroNet, rng: &mut ChaCha8Rng) {
    let ids: Vec<ParamId> = net
        .params()
        .ids()
        .filter(|&id| net.params().name(id).ends_with(".b"))
        .collect();
    for id in ids {
        net.params_mut()
            .get_mut(id)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-0.2..0.2));
    }
}

/// One randomized small net: relaxed supernet for even `k`, a random
/// genotype otherwise.
pub fn random_net_case(k: u64) -> (MicroNet, Batch, ModeSpec, ArchParams, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + k);
    let side = rng.random_range(3..=6);
    let cfg = NetConfig {
        channels: rng.random_range(2..=4),
        cells: rng.random_range(1..=2),
        input: ImageShape::new(side, side, rng.random_range(1..=3)),
        num_classes: rng.random_range(2..=4),
    };
    let n = rng.random_range(2..=3);
    let batch = random_batch(&mut rng, n, cfg.input, cfg.num_classes);
    let arch = ArchParams::random_init(&mut rng, 1.0);
    if k.is_multiple_of(2) {
        let mut net = MicroNet::supernet(cfg, k).unwrap();
        jitter_biases(&mut net, &mut rng);
        (net, batch, ModeSpec::Relaxed, arch, rng)
    } else {
        let mut g = random_genotype(&mut rng);
        // keep at least one conv so every case exercises the conv kernels
        if g.conv_edges() == 0 {
            g.0[5] = OpKind::Conv3x3;
        }
        let mut net = MicroNet::for_genotype(g, cfg, k).unwrap();
        jitter_biases(&mut net, &mut rng);
        (net, batch, ModeSpec::Discrete(g), arch, rng)
    }
}

/// Finite-difference check of one op in isolation:
/// `loss = CE(linear(gap(op(x))))`, gradients w.r.t. `x` and the op's
/// weights.
pub fn fd_check_op(op: OpKind, seed: u64) -> FdReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, c, h, w, classes) = (2, 3, 5, 4, 3);
    let x = Tensor::new(
        vec![b, c, h, w],
        (0..b * c * h * w).map(|_| rng.random::<f64>() - 0.5).collect(),
    )
    .unwrap();
    let k = op.kernel().unwrap_or(1);
    let cw = Tensor::new(
        vec![c, c, k, k],
        (0..c * c * k * k).map(|_| rng.random::<f64>() - 0.5).collect(),
    )
    .unwrap();
    let cb = Tensor::new(vec![c], (0..c).map(|_| rng.random::<f64>() - 0.5).collect()).unwrap();
    let lw = Tensor::new(
        vec![classes, c],
        (0..classes * c).map(|_| rng.random::<f64>() - 0.5).collect(),
    )
    .unwrap();
    let lb = Tensor::zeros(vec![classes]);
    let labels = vec![0, 2];

    let run = |x: &Tensor, cw: &Tensor, cb: &Tensor| {
        let mut g = Graph::new();
        let xi = g.param(param_id(0), x);
        let y = match op {
            OpKind::Zeroize => g.constant(Tensor::zeros(x.shape().to_vec())),
            OpKind::Skip => xi,
            OpKind::AvgPool3x3 => g.avg_pool3(xi).unwrap(),
            OpKind::Conv3x3 | OpKind::Conv1x1 => {
                let r = g.relu(xi);
                let wi = g.param(param_id(1), cw);
                let bi = g.param(param_id(2), cb);
                g.conv2d(r, wi, bi).unwrap()
            }
        };
        let p = g.global_avg_pool(y).unwrap();
        let li = g.constant(lw.clone());
        let lbi = g.constant(lb.clone());
        let out = g.linear(p, li, lbi).unwrap();
        g.cross_entropy(out, &labels).unwrap();
        let loss = g.value(g.loss().unwrap()).data()[0];
        (loss, g.relu_inputs(), g.backward().unwrap())
    };
    let (_, base, grads) = run(&x, &cw, &cb);
    let mut rep = FdReport::default();
    let mut tensors = [x, cw, cb];
    for t in 0..3 {
        if t > 0 && !op.is_conv() {
            break;
        }
        for i in 0..tensors[t].len() {
            let analytic = grads.param(param_id(t)).map_or(0.0, |g| g.data()[i]);
            let orig = tensors[t].data()[i];
            let numeric = central_diff(&base, |h| {
                tensors[t].data_mut()[i] = orig + h;
                let (l, p, _) = run(&tensors[0], &tensors[1], &tensors[2]);
                tensors[t].data_mut()[i] = orig;
                (l, p)
            });
            match numeric {
                Some(n) => rep.record(format!("{op} t{t}[{i}]"), analytic, n),
                None => rep.skipped += 1,
            }
        }
    }
    rep
}

pub fn param_id(i: usize) -> ParamId {
    ParamId::new(i)
}
