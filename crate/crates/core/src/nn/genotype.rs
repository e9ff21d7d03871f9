use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::graph::softmax;
use super::{NnError, NUM_EDGES, NUM_NODES, NUM_OPS};

/// Cell edges `(from, to)` in lexicographic order; edge id `k + 1` is
/// `EDGES[k]`.
pub const EDGES: [(usize, usize); NUM_EDGES] = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)];

/// Position of edge `(from, to)` in [`EDGES`].
pub fn edge_index(from: usize, to: usize) -> usize {
    EDGES
        .iter()
        .position(|&e| e == (from, to))
        .unwrap_or_else(|| panic!("({from}, {to}) is not a cell edge"))
}

/// Candidate operations, in serialization order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpKind {
    #[serde(rename = "nor_conv_3x3")]
    Conv3x3,
    #[serde(rename = "nor_conv_1x1")]
    Conv1x1,
    #[serde(rename = "avg_pool_3x3")]
    AvgPool3x3,
    #[serde(rename = "skip_connect")]
    Skip,
    #[serde(rename = "none")]
    Zeroize,
}

impl OpKind {
    pub const ALL: [OpKind; NUM_OPS] = [
        OpKind::Conv3x3,
        OpKind::Conv1x1,
        OpKind::AvgPool3x3,
        OpKind::Skip,
        OpKind::Zeroize,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Name used in genotype strings.
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Conv3x3 => "nor_conv_3x3",
            OpKind::Conv1x1 => "nor_conv_1x1",
            OpKind::AvgPool3x3 => "avg_pool_3x3",
            OpKind::Skip => "skip_connect",
            OpKind::Zeroize => "none",
        }
    }

    pub fn is_conv(self) -> bool {
        matches!(self, OpKind::Conv3x3 | OpKind::Conv1x1)
    }

    /// Convolution kernel size, if any.
    pub fn kernel(self) -> Option<usize> {
        match self {
            OpKind::Conv3x3 => Some(3),
            OpKind::Conv1x1 => Some(1),
            _ => None,
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = NnError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        OpKind::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| NnError::Genotype(format!("unknown operation '{s}'")))
    }
}

/// One operation per cell edge, indexed like [`EDGES`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Genotype(pub [OpKind; NUM_EDGES]);

impl Genotype {
    /// Number of distinct genotypes.
    pub const SPACE_SIZE: usize = NUM_OPS.pow(NUM_EDGES as u32);

    pub fn uniform(op: OpKind) -> Self {
        Genotype([op; NUM_EDGES])
    }

    pub fn ops(&self) -> &[OpKind; NUM_EDGES] {
        &self.0
    }

    /// Op on edge id `1..=6`.
    pub fn edge(&self, id: usize) -> OpKind {
        self.0[id - 1]
    }

    /// Base-5 code with edge 1 as the most significant digit.
    pub fn code(&self) -> usize {
        self.0.iter().fold(0, |acc, op| acc * NUM_OPS + op.index())
    }

    pub fn from_code(code: usize) -> Option<Self> {
        if code >= Self::SPACE_SIZE {
            return None;
        }
        let mut ops = [OpKind::Zeroize; NUM_EDGES];
        let mut c = code;
        for slot in ops.iter_mut().rev() {
            *slot = OpKind::ALL[c % NUM_OPS];
            c /= NUM_OPS;
        }
        Some(Genotype(ops))
    }

    pub fn conv_edges(&self) -> usize {
        self.0.iter().filter(|op| op.is_conv()).count()
    }

    /// Replaces edges that cannot influence the cell output with
    /// `Zeroize`: edges leaving a node that has no live path to node 3, and
    /// edges leaving a node that is identically zero.
    pub fn canonical(&self) -> Genotype {
        let mut ops = self.0;
        // zero[j]: node j is identically zero (node 0 is the cell input)
        let mut zero = [false; NUM_NODES];
        for j in 1..NUM_NODES {
            for (k, &(from, to)) in EDGES.iter().enumerate() {
                if to == j && zero[from] {
                    ops[k] = OpKind::Zeroize;
                }
            }
            zero[j] = EDGES
                .iter()
                .enumerate()
                .all(|(k, &(_, to))| to != j || ops[k] == OpKind::Zeroize);
        }
        let mut live = [false; NUM_NODES];
        live[NUM_NODES - 1] = true;
        for i in (0..NUM_NODES - 1).rev() {
            live[i] = EDGES
                .iter()
                .enumerate()
                .any(|(k, &(from, to))| from == i && live[to] && ops[k] != OpKind::Zeroize);
        }
        for (k, &(from, to)) in EDGES.iter().enumerate() {
            if !live[to] || !live[from] {
                ops[k] = OpKind::Zeroize;
            }
        }
        Genotype(ops)
    }
}

impl fmt::Display for Genotype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for node in 1..NUM_NODES {
            if node > 1 {
                f.write_str("+")?;
            }
            f.write_str("|")?;
            for src in 0..node {
                write!(f, "{}~{src}|", self.0[edge_index(src, node)])?;
            }
        }
        Ok(())
    }
}

impl FromStr for Genotype {
    type Err = NnError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = |why: String| NnError::Genotype(format!("'{s}': {why}"));
        let groups: Vec<&str> = s.trim().split('+').collect();
        if groups.len() != NUM_NODES - 1 {
            return Err(bad(format!("expected {} node groups", NUM_NODES - 1)));
        }
        let mut ops = [OpKind::Zeroize; NUM_EDGES];
        for (g, group) in groups.iter().enumerate() {
            let node = g + 1;
            let inner = group
                .strip_prefix('|')
                .and_then(|t| t.strip_suffix('|'))
                .ok_or_else(|| bad(format!("group {node} must be wrapped in '|'")))?;
            let items: Vec<&str> = inner.split('|').collect();
            if items.len() != node {
                return Err(bad(format!("node {node} needs {node} inputs")));
            }
            for (src, item) in items.iter().enumerate() {
                let (name, from) = item
                    .split_once('~')
                    .ok_or_else(|| bad(format!("'{item}' is not op~input")))?;
                if from.parse::<usize>().ok() != Some(src) {
                    return Err(bad(format!("'{item}' should read from node {src}")));
                }
                ops[edge_index(src, node)] = name.parse::<OpKind>()?;
            }
        }
        Ok(Genotype(ops))
    }
}

impl Serialize for Genotype {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Genotype {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Architecture logits: one vector of op scores per edge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArchParams {
    pub logits: [[f64; NUM_OPS]; NUM_EDGES],
}

impl Default for ArchParams {
    fn default() -> Self {
        Self::uniform()
    }
}

impl ArchParams {
    pub fn new(logits: [[f64; NUM_OPS]; NUM_EDGES]) -> Result<Self, NnError> {
        if logits.iter().flatten().any(|v| !v.is_finite()) {
            return Err(NnError::NonFinite("architecture logits".into()));
        }
        Ok(Self { logits })
    }

    pub fn uniform() -> Self {
        Self {
            logits: [[0.0; NUM_OPS]; NUM_EDGES],
        }
    }

    /// Small random logits, as commonly used to break symmetry.
    pub fn random_init(rng: &mut impl rand::Rng, scale: f64) -> Self {
        let mut logits = [[0.0; NUM_OPS]; NUM_EDGES];
        logits
            .iter_mut()
            .flatten()
            .for_each(|v| *v = scale * (rng.random::<f64>() * 2.0 - 1.0));
        Self { logits }
    }

    /// Logits that put (almost) all weight on one op per edge.
    pub fn one_hot(genotype: &Genotype, high: f64) -> Self {
        let mut logits = [[0.0; NUM_OPS]; NUM_EDGES];
        for (row, op) in logits.iter_mut().zip(genotype.ops()) {
            row[op.index()] = high;
        }
        Self { logits }
    }

    pub fn softmax(&self, edge: usize) -> [f64; NUM_OPS] {
        softmax(&self.logits[edge]).try_into().expect("five ops")
    }

    pub fn is_finite(&self) -> bool {
        self.logits.iter().flatten().all(|v| v.is_finite())
    }

    /// Per-edge argmax; ties go to the lowest op index.
    pub fn argmax(&self) -> Genotype {
        let mut ops = [OpKind::Conv3x3; NUM_EDGES];
        for (slot, row) in ops.iter_mut().zip(&self.logits) {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = i;
                }
            }
            *slot = OpKind::ALL[best];
        }
        Genotype(ops)
    }
}
