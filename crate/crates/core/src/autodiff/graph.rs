//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the tape index is already a
//! topological order and `backward` is a single reverse sweep.

use std::collections::HashMap;

use super::params::{ParamId, ParamRegistry};
use super::sparsemax::{sparsemax_backward_into, sparsemax_into};
use super::tensor::{matmul_nt_into, matmul_tn_into, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    SoftmaxRows(Var),
    SparsemaxRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Broadcast(Var),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
    /// Accumulated gradient, kept for leaves only.
    grad: Option<Tensor>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    /// Trainable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf bound to a registry parameter; repeated calls return the same node.
    pub fn param(&mut self, registry: &ParamRegistry, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(registry.value(id).clone());
        self.nodes[v.0].param = Some(id);
        self.params.insert(id, v);
        v
    }

    /// Accumulated gradient of a leaf; zeros for constants and untouched leaves.
    pub fn grad(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        node.grad
            .clone()
            .unwrap_or_else(|| Tensor::zeros(node.value.rows(), node.value.cols()))
    }

    /// Adds every parameter leaf's gradient into the registry.
    pub fn accumulate_param_grads(&self, registry: &mut ParamRegistry) {
        for (&id, &v) in &self.params {
            if let Some(g) = &self.nodes[v.0].grad {
                registry.get_mut(id).grad.add_assign(g);
            }
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                left: sa,
                right: sb,
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(value, Op::Transpose(a), rg)
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(op, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.rows(), va.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, factor), rg)
    }

    pub fn add_scalar(&mut self, a: Var, shift: f64) -> Var {
        let value = self.value(a).map(|x| x + shift);
        let rg = self.rg(a);
        self.push(value, Op::AddScalar(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        let rg = self.rg(a);
        self.push(value, Op::Log(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.cols() == 0 {
            return Err(Error::Empty { op: "softmax" });
        }
        let mut value = x.clone();
        for r in 0..value.rows() {
            let row = value.row_slice_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        let rg = self.rg(a);
        Ok(self.push(value, Op::SoftmaxRows(a), rg))
    }

    /// Row-wise simplex projection.
    pub fn sparsemax_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.cols() == 0 {
            return Err(Error::Empty { op: "sparsemax" });
        }
        let mut value = Tensor::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            sparsemax_into(x.row_slice(r), value.row_slice_mut(r));
        }
        let rg = self.rg(a);
        Ok(self.push(value, Op::SparsemaxRows(a), rg))
    }

    /// Concatenation along the last axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Empty { op: "concat_cols" });
        };
        let rows = self.shape(first)[0];
        let mut cols = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[0] != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    left: self.shape(first),
                    right: s,
                });
            }
            cols += s[1];
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let value = Tensor::new(rows, cols, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Empty { op: "concat_rows" });
        };
        let cols = self.shape(first)[1];
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1] != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    left: self.shape(first),
                    right: s,
                });
            }
            rows += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(rows, cols, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Rows by index (repeats allowed); backward scatter-adds.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let value = self.value(a).select_rows(indices)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::GatherRows(a, indices.to_vec()), rg))
    }

    /// Expands a `1 x n` row or `n x 1` column (or scalar) to `rows x cols`.
    pub fn broadcast(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let x = self.value(a);
        let [ar, ac] = x.shape();
        let ok = (ar == 1 || ar == rows) && (ac == 1 || ac == cols);
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "broadcast",
                left: [ar, ac],
                right: [rows, cols],
            });
        }
        let mut value = Tensor::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                value.set(r, c, x.get(r % ar, c % ac));
            }
        }
        let rg = self.rg(a);
        Ok(self.push(value, Op::Broadcast(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).data().iter().sum());
        let rg = self.rg(a);
        self.push(value, Op::Sum(a), rg)
    }

    /// Adds `bias` (a `1 x n` row) to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let [r, c] = self.shape(a);
        let b = self.broadcast(bias, r, c)?;
        self.add(a, b)
    }

    /// Propagates `d output / d node` back through the tape.
    ///
    /// Leaf gradients accumulate across calls; intermediate adjoints are
    /// recomputed each time.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        let shape = self.shape(output);
        if shape != [1, 1] {
            return Err(Error::NonScalarSeed(shape));
        }
        let mut adj: Vec<Option<Tensor>> = Vec::with_capacity(output.0 + 1);
        adj.resize_with(output.0 + 1, || None);
        adj[output.0] = Some(Tensor::scalar(1.0));

        for i in (0..=output.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.add_assign(&g),
                    None => node.grad = Some(g),
                }
                continue;
            }
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let (n, k, m) = (va.rows(), va.cols(), vb.cols());
                    if self.rg(*a) {
                        let ga = slot(&mut adj, *a, n, k);
                        matmul_nt_into(g.data(), vb.data(), ga.data_mut(), n, m, k);
                    }
                    if self.rg(*b) {
                        let gb = slot(&mut adj, *b, k, m);
                        matmul_tn_into(va.data(), g.data(), gb.data_mut(), n, k, m);
                    }
                }
                Op::Transpose(a) => {
                    let gt = g.transpose();
                    add_into(&mut adj, *a, &gt);
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        add_into(&mut adj, *a, &g);
                    }
                    if self.rg(*b) {
                        add_into(&mut adj, *b, &g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(*a) {
                        add_into(&mut adj, *a, &g);
                    }
                    if self.rg(*b) {
                        add_into(&mut adj, *b, &g.map(|x| -x));
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    if self.rg(*a) {
                        let ga = slot(&mut adj, *a, va.rows(), va.cols());
                        for ((o, &gv), &bv) in ga.data_mut().iter_mut().zip(g.data()).zip(vb.data()) {
                            *o += gv * bv;
                        }
                    }
                    if self.rg(*b) {
                        let gb = slot(&mut adj, *b, vb.rows(), vb.cols());
                        for ((o, &gv), &av) in gb.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                            *o += gv * av;
                        }
                    }
                }
                Op::Scale(a, f) => {
                    let f = *f;
                    add_into(&mut adj, *a, &g.map(|x| x * f));
                }
                Op::AddScalar(a) => add_into(&mut adj, *a, &g),
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let ga = slot(&mut adj, *a, x.rows(), x.cols());
                    for ((o, &gv), &xv) in ga.data_mut().iter_mut().zip(g.data()).zip(x.data()) {
                        if xv > 0.0 {
                            *o += gv;
                        }
                    }
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let ga = slot(&mut adj, *a, y.rows(), y.cols());
                    for ((o, &gv), &yv) in ga.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *o += gv * yv * (1.0 - yv);
                    }
                }
                Op::Log(a) => {
                    let x = self.value(*a);
                    let ga = slot(&mut adj, *a, x.rows(), x.cols());
                    for ((o, &gv), &xv) in ga.data_mut().iter_mut().zip(g.data()).zip(x.data()) {
                        *o += gv / xv;
                    }
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let ga = slot(&mut adj, *a, y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row_slice(r), g.row_slice(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((o, &yv), &gv) in ga.row_slice_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o += yv * (gv - dot);
                        }
                    }
                }
                Op::SparsemaxRows(a) => {
                    let y = &node.value;
                    let ga = slot(&mut adj, *a, y.rows(), y.cols());
                    for r in 0..y.rows() {
                        sparsemax_backward_into(y.row_slice(r), g.row_slice(r), ga.row_slice_mut(r));
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let [pr, pc] = self.shape(p);
                        if self.rg(p) {
                            let gp = slot(&mut adj, p, pr, pc);
                            for r in 0..pr {
                                let src = &g.row_slice(r)[offset..offset + pc];
                                for (o, &s) in gp.row_slice_mut(r).iter_mut().zip(src) {
                                    *o += s;
                                }
                            }
                        }
                        offset += pc;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    let cols = g.cols();
                    for &p in parts {
                        let [pr, pc] = self.shape(p);
                        if self.rg(p) {
                            let gp = slot(&mut adj, p, pr, pc);
                            let src = &g.data()[offset * cols..(offset + pr) * cols];
                            for (o, &s) in gp.data_mut().iter_mut().zip(src) {
                                *o += s;
                            }
                        }
                        offset += pr;
                    }
                }
                Op::GatherRows(a, indices) => {
                    let [ar, ac] = self.shape(*a);
                    let ga = slot(&mut adj, *a, ar, ac);
                    for (r, &src) in indices.iter().enumerate() {
                        for (o, &s) in ga.row_slice_mut(src).iter_mut().zip(g.row_slice(r)) {
                            *o += s;
                        }
                    }
                }
                Op::Broadcast(a) => {
                    let [ar, ac] = self.shape(*a);
                    let ga = slot(&mut adj, *a, ar, ac);
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            let v = ga.get(r % ar, c % ac) + g.get(r, c);
                            ga.set(r % ar, c % ac, v);
                        }
                    }
                }
                Op::Sum(a) => {
                    let [ar, ac] = self.shape(*a);
                    let gv = g.item();
                    add_into(&mut adj, *a, &Tensor::full(ar, ac, gv));
                }
            }
        }
        Ok(())
    }
}

fn slot(adj: &mut [Option<Tensor>], v: Var, rows: usize, cols: usize) -> &mut Tensor {
    adj[v.0].get_or_insert_with(|| Tensor::zeros(rows, cols))
}

fn add_into(adj: &mut [Option<Tensor>], v: Var, g: &Tensor) {
    match &mut adj[v.0] {
        Some(acc) => acc.add_assign(g),
        None => adj[v.0] = Some(g.clone()),
    }
}
