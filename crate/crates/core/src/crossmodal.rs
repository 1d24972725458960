//! Text-image graph construction and the GCN stack over it.
//!
//! Nodes `0..m` are tokens and `m..m+r` are patches. Tokens are linked by
//! (symmetrized) dependency edges, every token is linked to every patch, and
//! patches are linked to their 8-neighbourhood on the `z x z` grid. There
//! are no self-loops.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Init, ParamId, ParamRegistry, Tensor, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};

/// Grid position of a 0-based patch index.
pub fn patch_coords(q: usize, z: usize) -> (usize, usize) {
    (q / z, q % z)
}

pub fn patches_adjacent(a: usize, b: usize, z: usize) -> bool {
    let (ra, ca) = patch_coords(a, z);
    let (rb, cb) = patch_coords(b, z);
    a != b && ra.abs_diff(rb) <= 1 && ca.abs_diff(cb) <= 1
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossModalGraph {
    pub m: usize,
    pub r: usize,
    pub z: usize,
    pub adjacency: Tensor,
    pub normalized: Tensor,
}

impl CrossModalGraph {
    pub fn build(dep_edges: &[(usize, usize)], m: usize, z: usize) -> Result<Self> {
        let adjacency = build_adjacency(dep_edges, m, z)?;
        let normalized = normalize(&adjacency)?;
        Ok(Self {
            m,
            r: z * z,
            z,
            adjacency,
            normalized,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.m + self.r
    }

    pub fn degree(&self, node: usize) -> usize {
        self.adjacency.row_slice(node).iter().filter(|&&x| x != 0.0).count()
    }
}

/// Binary symmetric adjacency over `m` tokens and `z * z` patches.
pub fn build_adjacency(dep_edges: &[(usize, usize)], m: usize, z: usize) -> Result<Tensor> {
    if z == 0 {
        return Err(Error::Config("grid side z must be at least 1".into()));
    }
    let r = z * z;
    let n = m + r;
    let mut a = Tensor::zeros(n, n);
    for &(i, j) in dep_edges {
        for e in [i, j] {
            if e >= m {
                return Err(Error::OutOfRange {
                    what: "dependency edge endpoint",
                    index: e,
                    len: m,
                });
            }
        }
        if i != j {
            a.set(i, j, 1.0);
            a.set(j, i, 1.0);
        }
    }
    for t in 0..m {
        for p in m..n {
            a.set(t, p, 1.0);
            a.set(p, t, 1.0);
        }
    }
    for p in 0..r {
        for q in 0..r {
            if patches_adjacent(p, q, z) {
                a.set(m + p, m + q, 1.0);
            }
        }
    }
    Ok(a)
}

/// `D^{-1/2} A D^{-1/2}`.
pub fn normalize(a: &Tensor) -> Result<Tensor> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::ShapeMismatch {
            op: "normalize",
            left: a.shape(),
            right: [n, n],
        });
    }
    let mut inv_sqrt = Vec::with_capacity(n);
    for i in 0..n {
        let deg: f64 = a.row_slice(i).iter().sum();
        if deg <= 0.0 {
            return Err(Error::ZeroDegree(i));
        }
        inv_sqrt.push(1.0 / deg.sqrt());
    }
    let mut out = a.clone();
    for i in 0..n {
        for j in 0..n {
            let v = a.get(i, j);
            if v != 0.0 {
                out.set(i, j, v * inv_sqrt[i] * inv_sqrt[j]);
            }
        }
    }
    Ok(out)
}

/// `H^l = ReLU(Ã H^{l-1} W^l)` for `l = 1..=L`.
#[derive(Debug, Clone)]
pub struct GcnStack {
    weights: Vec<ParamId>,
    width: usize,
}

impl GcnStack {
    pub fn register(reg: &mut ParamRegistry, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let weights = (1..=cfg.num_layers)
            .map(|l| reg.init(format!("gcn.w{l}"), cfg.d, cfg.d, Init::Xavier, rng))
            .collect::<Result<_>>()?;
        Ok(Self { weights, width: cfg.d })
    }

    pub fn bind(reg: &ParamRegistry, cfg: &ModelConfig) -> Result<Self> {
        let weights = (1..=cfg.num_layers)
            .map(|l| reg.id(&format!("gcn.w{l}")))
            .collect::<Result<_>>()?;
        Ok(Self { weights, width: cfg.d })
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    /// Returns `H^0 ..= H^upto`.
    pub fn forward(
        &self,
        graph: &mut Graph,
        reg: &ParamRegistry,
        h0: Var,
        normalized: &Tensor,
        upto: usize,
    ) -> Result<Vec<Var>> {
        let [rows, cols] = graph.shape(h0);
        if cols != self.width {
            return Err(Error::ShapeMismatch {
                op: "gcn_forward",
                left: [rows, cols],
                right: [rows, self.width],
            });
        }
        if normalized.rows() != rows {
            return Err(Error::ShapeMismatch {
                op: "gcn_forward",
                left: normalized.shape(),
                right: [rows, cols],
            });
        }
        let upto = upto.min(self.weights.len());
        let a = graph.constant(normalized.clone());
        let mut layers = vec![h0];
        for &w in &self.weights[..upto] {
            let prev = *layers.last().expect("non-empty");
            let w = graph.param(reg, w);
            let mixed = graph.matmul(a, prev)?;
            let h = graph.matmul(mixed, w)?;
            layers.push(graph.relu(h));
        }
        Ok(layers)
    }
}
