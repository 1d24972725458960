//! Atom truth values, product t-norm connectives, head truth and the
//! label loss.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Init, ParamId, ParamRegistry, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};

/// Guard added to every head truth before normalization.
pub const EPSILON: f64 = 1e-8;

fn check_truth(x: f64) -> Result<f64> {
    if (0.0..=1.0).contains(&x) {
        Ok(x)
    } else {
        Err(Error::TruthRange(x))
    }
}

pub fn t_and(a: f64, b: f64) -> Result<f64> {
    Ok(check_truth(a)? * check_truth(b)?)
}

pub fn t_or(a: f64, b: f64) -> Result<f64> {
    Ok(1.0 - (1.0 - check_truth(a)?) * (1.0 - check_truth(b)?))
}

/// Left fold of [`t_and`]; the empty conjunction is 1.
pub fn t_and_all(values: &[f64]) -> Result<f64> {
    values.iter().try_fold(1.0, |acc, &x| t_and(acc, x))
}

/// Left fold of [`t_or`]; the empty disjunction is 0.
pub fn t_or_all(values: &[f64]) -> Result<f64> {
    values.iter().try_fold(0.0, |acc, &x| t_or(acc, x))
}

/// Product of all entries of a `1 x n` or `n x 1` truth vector.
pub fn and_on_graph(graph: &mut Graph, truths: Var) -> Result<Var> {
    let [rows, cols] = graph.shape(truths);
    let n = rows * cols;
    if n == 0 {
        return Err(Error::Empty { op: "and_on_graph" });
    }
    let flat = if rows == 1 { graph.transpose(truths) } else { truths };
    let mut acc = graph.gather_rows(flat, &[0])?;
    for i in 1..n {
        let next = graph.gather_rows(flat, &[i])?;
        acc = graph.mul(acc, next)?;
    }
    Ok(acc)
}

/// `1 - (1-a)(1-b)` on same-shaped vars.
pub fn or_on_graph(graph: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let na = graph.scale(a, -1.0);
    let na = graph.add_scalar(na, 1.0);
    let nb = graph.scale(b, -1.0);
    let nb = graph.add_scalar(nb, 1.0);
    let both = graph.mul(na, nb)?;
    let neg = graph.scale(both, -1.0);
    Ok(graph.add_scalar(neg, 1.0))
}

/// Label-aware atom truth `μ = sigmoid(s · [b, p, b-p, b∘p] W_μ)`, `p = o∘y`.
#[derive(Debug, Clone, Copy)]
pub struct TruthModel {
    weights: ParamId,
}

impl TruthModel {
    pub fn register(reg: &mut ParamRegistry, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            weights: reg.init("truth.w", 4 * cfg.d, 1, Init::Xavier, rng)?,
        })
    }

    pub fn bind(reg: &ParamRegistry) -> Result<Self> {
        Ok(Self {
            weights: reg.id("truth.w")?,
        })
    }

    /// `q x 1` truths for `q` atoms; `predicates`, `objects` are `q x d`,
    /// `scores` is `q x 1` and `label` is `1 x d`.
    pub fn atom_truths(
        &self,
        graph: &mut Graph,
        reg: &ParamRegistry,
        predicates: Var,
        objects: Var,
        scores: Var,
        label: Var,
    ) -> Result<Var> {
        let [q, d] = graph.shape(predicates);
        let y = graph.broadcast(label, q, d)?;
        let p = graph.mul(objects, y)?;
        let diff = graph.sub(predicates, p)?;
        let prod = graph.mul(predicates, p)?;
        let features = graph.concat_cols(&[predicates, p, diff, prod])?;
        let w = graph.param(reg, self.weights);
        let logits = graph.matmul(features, w)?;
        let logits = graph.mul(logits, scores)?;
        Ok(graph.sigmoid(logits))
    }

    /// Numeric single-atom truth for slices of length `d`.
    pub fn atom_truth(&self, reg: &ParamRegistry, b: &[f64], o: &[f64], y: &[f64], s: f64) -> f64 {
        let w = reg.value(self.weights).data();
        let d = b.len();
        let mut logit = 0.0;
        for i in 0..d {
            let p = o[i] * y[i];
            logit += b[i] * w[i] + p * w[d + i] + (b[i] - p) * w[2 * d + i] + b[i] * p * w[3 * d + i];
        }
        sigmoid(s * logit)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `(μ_y + ε) / Σ (μ + ε)`.
pub fn label_probabilities(truths: &[f64]) -> Vec<f64> {
    let total: f64 = truths.iter().map(|t| t + EPSILON).sum();
    truths.iter().map(|t| (t + EPSILON) / total).collect()
}

/// Index of the largest value; ties go to the lower index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// `-log p(gold)` from a `1 x n` row of head truths.
pub fn nll_on_graph(graph: &mut Graph, truths: Var, gold: usize) -> Result<Var> {
    let [_, n] = graph.shape(truths);
    if n < 2 {
        return Err(Error::Config("at least two labels are required".into()));
    }
    if gold >= n {
        return Err(Error::OutOfRange {
            what: "gold label",
            index: gold,
            len: n,
        });
    }
    let guarded = graph.add_scalar(truths, EPSILON);
    let total = graph.sum(guarded);
    let column = graph.transpose(guarded);
    let numer = graph.gather_rows(column, &[gold])?;
    let log_total = graph.log(total);
    let log_numer = graph.log(numer);
    graph.sub(log_total, log_numer)
}

/// Numeric version of [`nll_on_graph`].
pub fn nll(truths: &[f64], gold: usize) -> f64 {
    -label_probabilities(truths)[gold].ln()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// Head truth per label.
    pub truths: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub label: usize,
}

impl Prediction {
    pub fn from_truths(truths: Vec<f64>) -> Self {
        let probabilities = label_probabilities(&truths);
        let label = argmax(&probabilities);
        Self {
            truths,
            probabilities,
            label,
        }
    }
}
