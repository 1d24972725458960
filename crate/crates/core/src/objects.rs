//! Cross-modal constants for the five meta-predicates and top-k selection.

use std::fmt;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Init, ParamId, ParamRegistry, Tensor, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MetaPredicate {
    #[serde(rename = "b_t")]
    Token,
    #[serde(rename = "b_v")]
    Patch,
    #[serde(rename = "b_tt")]
    TokenPair,
    #[serde(rename = "b_vv")]
    PatchPair,
    #[serde(rename = "b_tv")]
    TokenPatch,
}

impl MetaPredicate {
    /// Stacking order of the predicate embeddings.
    pub const ALL: [MetaPredicate; 5] = [
        MetaPredicate::Token,
        MetaPredicate::Patch,
        MetaPredicate::TokenPair,
        MetaPredicate::PatchPair,
        MetaPredicate::TokenPatch,
    ];

    pub fn symbol(self) -> &'static str {
        match self {
            MetaPredicate::Token => "b_t",
            MetaPredicate::Patch => "b_v",
            MetaPredicate::TokenPair => "b_tt",
            MetaPredicate::PatchPair => "b_vv",
            MetaPredicate::TokenPatch => "b_tv",
        }
    }

    fn key(self) -> &'static str {
        &self.symbol()[2..]
    }

    pub fn position(self) -> usize {
        self as usize
    }

    pub fn is_pair(self) -> bool {
        !matches!(self, MetaPredicate::Token | MetaPredicate::Patch)
    }

    /// Number of candidate constants for `m` tokens and `r` patches.
    pub fn candidate_count(self, m: usize, r: usize) -> usize {
        match self {
            MetaPredicate::Token => m,
            MetaPredicate::Patch => r,
            MetaPredicate::TokenPair => m * m.saturating_sub(1),
            MetaPredicate::PatchPair => r * r.saturating_sub(1),
            MetaPredicate::TokenPatch => m * r,
        }
    }

    /// Candidate constants in canonical order (pairs row-major, `i != j`
    /// within one modality).
    pub fn candidates(self, m: usize, r: usize) -> Vec<Constant> {
        match self {
            MetaPredicate::Token => (0..m).map(Constant::Token).collect(),
            MetaPredicate::Patch => (0..r).map(Constant::Patch).collect(),
            MetaPredicate::TokenPair => ordered_pairs(m).map(|(i, j)| Constant::TokenPair(i, j)).collect(),
            MetaPredicate::PatchPair => ordered_pairs(r).map(|(i, j)| Constant::PatchPair(i, j)).collect(),
            MetaPredicate::TokenPatch => (0..m)
                .flat_map(|i| (0..r).map(move |j| Constant::TokenPatch(i, j)))
                .collect(),
        }
    }
}

impl fmt::Display for MetaPredicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

fn ordered_pairs(n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).flat_map(move |i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
}

/// A token, a patch, or a pair of them instantiating a meta-predicate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "index", rename_all = "snake_case")]
pub enum Constant {
    Token(usize),
    Patch(usize),
    TokenPair(usize, usize),
    PatchPair(usize, usize),
    TokenPatch(usize, usize),
}

impl Constant {
    pub fn tokens(&self) -> Vec<usize> {
        match *self {
            Constant::Token(i) | Constant::TokenPatch(i, _) => vec![i],
            Constant::TokenPair(i, j) => vec![i, j],
            _ => vec![],
        }
    }

    pub fn patches(&self) -> Vec<usize> {
        match *self {
            Constant::Patch(j) | Constant::TokenPatch(_, j) => vec![j],
            Constant::PatchPair(i, j) => vec![i, j],
            _ => vec![],
        }
    }
}

impl fmt::Display for Constant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Constant::Token(i) => write!(f, "t_{i}"),
            Constant::Patch(j) => write!(f, "v_{j}"),
            Constant::TokenPair(i, j) => write!(f, "(t_{i},t_{j})"),
            Constant::PatchPair(i, j) => write!(f, "(v_{i},v_{j})"),
            Constant::TokenPatch(i, j) => write!(f, "(t_{i},v_{j})"),
        }
    }
}

/// Selected constants for one meta-predicate.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectSet {
    pub kind: MetaPredicate,
    pub constants: Vec<Constant>,
    /// `k x d`, each row gated by `sigmoid(score)`.
    pub embeddings: Tensor,
    pub scores: Vec<f64>,
}

/// Indices of the `k` largest scores (ties to the lower index). With fewer
/// than `k` candidates the best one is repeated to fill the set.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    if let Some(&best) = order.first() {
        while order.len() < k {
            order.push(best);
        }
    }
    order
}

#[derive(Debug, Clone, Copy)]
struct KindParams {
    object: ParamId,
    score_w1: ParamId,
    score_b1: ParamId,
    score_w2: ParamId,
    score_b2: ParamId,
}

/// Object formulas and importance scorers for all five meta-predicates.
#[derive(Debug, Clone)]
pub struct ObjectGenerator {
    d: usize,
    k: usize,
    kinds: [KindParams; 5],
}

fn object_rows(kind: MetaPredicate, d: usize) -> usize {
    if kind.is_pair() {
        4 * d
    } else {
        d
    }
}

impl ObjectGenerator {
    pub fn register(reg: &mut ParamRegistry, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let d = cfg.d;
        let mut kinds = Vec::with_capacity(5);
        for kind in MetaPredicate::ALL {
            let key = kind.key();
            kinds.push(KindParams {
                object: reg.init(format!("obj.{key}.w"), object_rows(kind, d), d, Init::Xavier, rng)?,
                score_w1: reg.init(format!("obj.{key}.score.w1"), d, d, Init::Xavier, rng)?,
                score_b1: reg.init(format!("obj.{key}.score.b1"), 1, d, Init::Zeros, rng)?,
                score_w2: reg.init(format!("obj.{key}.score.w2"), d, 1, Init::Xavier, rng)?,
                score_b2: reg.init(format!("obj.{key}.score.b2"), 1, 1, Init::Zeros, rng)?,
            });
        }
        Ok(Self {
            d,
            k: cfg.k,
            kinds: kinds.try_into().expect("five kinds"),
        })
    }

    pub fn bind(reg: &ParamRegistry, cfg: &ModelConfig) -> Result<Self> {
        let mut kinds = Vec::with_capacity(5);
        for kind in MetaPredicate::ALL {
            let key = kind.key();
            kinds.push(KindParams {
                object: reg.id(&format!("obj.{key}.w"))?,
                score_w1: reg.id(&format!("obj.{key}.score.w1"))?,
                score_b1: reg.id(&format!("obj.{key}.score.b1"))?,
                score_w2: reg.id(&format!("obj.{key}.score.w2"))?,
                score_b2: reg.id(&format!("obj.{key}.score.b2"))?,
            });
        }
        Ok(Self {
            d: cfg.d,
            k: cfg.k,
            kinds: kinds.try_into().expect("five kinds"),
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// All candidate object embeddings of one kind, `n x d`, in
    /// [`MetaPredicate::candidates`] order.
    ///
    /// Pair objects use `[a, b, a-b, a∘b] W = a(W1+W3) + b(W2-W3) + (a∘b)W4`.
    pub fn candidate_objects(
        &self,
        reg: &ParamRegistry,
        kind: MetaPredicate,
        tokens: &Tensor,
        patches: &Tensor,
    ) -> Result<Tensor> {
        let d = self.d;
        let w = reg.value(self.kinds[kind.position()].object);
        let (m, r) = (tokens.rows(), patches.rows());
        match kind {
            MetaPredicate::Token => tokens.matmul(w),
            MetaPredicate::Patch => patches.matmul(w),
            _ => {
                let (left, right) = match kind {
                    MetaPredicate::TokenPair => (tokens, tokens),
                    MetaPredicate::PatchPair => (patches, patches),
                    _ => (tokens, patches),
                };
                let block = |b: usize| w.select_rows(&(b * d..(b + 1) * d).collect::<Vec<_>>());
                let (w1, w2, w3, w4) = (block(0)?, block(1)?, block(2)?, block(3)?);
                let mut wa = w1;
                wa.add_assign(&w3);
                let mut wb = Tensor::zeros(d, d);
                for ((o, &x), &y) in wb.data_mut().iter_mut().zip(w2.data()).zip(w3.data()) {
                    *o = x - y;
                }
                let pa = left.matmul(&wa)?;
                let pb = right.matmul(&wb)?;
                let constants = kind.candidates(m, r);
                let mut out = Tensor::zeros(constants.len(), d);
                let mut prod = vec![0.0; d];
                for (row, c) in constants.iter().enumerate() {
                    let (i, j) = match *c {
                        Constant::TokenPair(i, j) | Constant::PatchPair(i, j) | Constant::TokenPatch(i, j) => (i, j),
                        _ => unreachable!(),
                    };
                    for ((p, &a), &b) in prod.iter_mut().zip(left.row_slice(i)).zip(right.row_slice(j)) {
                        *p = a * b;
                    }
                    let dst = out.row_slice_mut(row);
                    for ((o, &a), &b) in dst.iter_mut().zip(pa.row_slice(i)).zip(pb.row_slice(j)) {
                        *o = a + b;
                    }
                    for (q, &pv) in prod.iter().enumerate() {
                        if pv == 0.0 {
                            continue;
                        }
                        for (o, &wv) in dst.iter_mut().zip(w4.row_slice(q)) {
                            *o += pv * wv;
                        }
                    }
                }
                Ok(out)
            }
        }
    }

    /// The five full object matrices.
    pub fn build_objects(&self, reg: &ParamRegistry, tokens: &Tensor, patches: &Tensor) -> Result<Vec<Tensor>> {
        MetaPredicate::ALL
            .iter()
            .map(|&kind| self.candidate_objects(reg, kind, tokens, patches))
            .collect()
    }

    /// Importance score `ReLU(o W1 + b1) w2 + b2` of every row.
    pub fn score(&self, reg: &ParamRegistry, kind: MetaPredicate, objects: &Tensor) -> Result<Vec<f64>> {
        let p = &self.kinds[kind.position()];
        let mut h = objects.matmul(reg.value(p.score_w1))?;
        let b1 = reg.value(p.score_b1);
        for r in 0..h.rows() {
            for (x, &b) in h.row_slice_mut(r).iter_mut().zip(b1.data()) {
                *x = (*x + b).max(0.0);
            }
        }
        let s = h.matmul(reg.value(p.score_w2))?;
        let b2 = reg.value(p.score_b2).item();
        Ok(s.data().iter().map(|x| x + b2).collect())
    }

    /// Picks the `k` best candidates of one kind.
    pub fn select_constants(
        &self,
        reg: &ParamRegistry,
        kind: MetaPredicate,
        tokens: &Tensor,
        patches: &Tensor,
    ) -> Result<Vec<Constant>> {
        let candidates = kind.candidates(tokens.rows(), patches.rows());
        if candidates.is_empty() {
            return Err(Error::NoCandidates(kind.symbol()));
        }
        let objects = self.candidate_objects(reg, kind, tokens, patches)?;
        let scores = self.score(reg, kind, &objects)?;
        Ok(top_k(&scores, self.k).into_iter().map(|i| candidates[i]).collect())
    }

    /// Numeric selection producing gated embeddings.
    pub fn select(
        &self,
        reg: &ParamRegistry,
        kind: MetaPredicate,
        tokens: &Tensor,
        patches: &Tensor,
    ) -> Result<ObjectSet> {
        let constants = self.select_constants(reg, kind, tokens, patches)?;
        let mut g = Graph::new();
        let t = g.constant(tokens.clone());
        let v = g.constant(patches.clone());
        let (emb, scores) = self.objects_on_graph(&mut g, reg, kind, t, v, &constants)?;
        Ok(ObjectSet {
            kind,
            constants,
            embeddings: g.value(emb).clone(),
            scores: g.value(scores).data().to_vec(),
        })
    }

    /// Differentiable embeddings of the given constants, gated by
    /// `sigmoid(score)`. Returns `(k x d embeddings, k x 1 scores)`.
    pub fn objects_on_graph(
        &self,
        graph: &mut Graph,
        reg: &ParamRegistry,
        kind: MetaPredicate,
        tokens: Var,
        patches: Var,
        constants: &[Constant],
    ) -> Result<(Var, Var)> {
        let p = self.kinds[kind.position()];
        let w = graph.param(reg, p.object);
        let features = match kind {
            MetaPredicate::Token | MetaPredicate::Patch => {
                let src = if kind == MetaPredicate::Token { tokens } else { patches };
                let idx: Vec<usize> = constants
                    .iter()
                    .map(|c| match *c {
                        Constant::Token(i) | Constant::Patch(i) => i,
                        _ => unreachable!("constant kind mismatch"),
                    })
                    .collect();
                graph.gather_rows(src, &idx)?
            }
            _ => {
                let (left, right) = match kind {
                    MetaPredicate::TokenPair => (tokens, tokens),
                    MetaPredicate::PatchPair => (patches, patches),
                    _ => (tokens, patches),
                };
                let (li, ri): (Vec<usize>, Vec<usize>) = constants
                    .iter()
                    .map(|c| match *c {
                        Constant::TokenPair(i, j) | Constant::PatchPair(i, j) | Constant::TokenPatch(i, j) => (i, j),
                        _ => unreachable!("constant kind mismatch"),
                    })
                    .unzip();
                let a = graph.gather_rows(left, &li)?;
                let b = graph.gather_rows(right, &ri)?;
                let diff = graph.sub(a, b)?;
                let prod = graph.mul(a, b)?;
                graph.concat_cols(&[a, b, diff, prod])?
            }
        };
        let objects = graph.matmul(features, w)?;

        let (w1, b1) = (graph.param(reg, p.score_w1), graph.param(reg, p.score_b1));
        let (w2, b2) = (graph.param(reg, p.score_w2), graph.param(reg, p.score_b2));
        let h = graph.matmul(objects, w1)?;
        let h = graph.add_row(h, b1)?;
        let h = graph.relu(h);
        let s = graph.matmul(h, w2)?;
        let scores = graph.add_row(s, b2)?;

        let gate = graph.sigmoid(scores);
        let [rows, cols] = graph.shape(objects);
        let gate = graph.broadcast(gate, rows, cols)?;
        let gated = graph.mul(objects, gate)?;
        Ok((gated, scores))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn setup(d: usize, k: usize) -> (ParamRegistry, ObjectGenerator) {
        let cfg = ModelConfig {
            d,
            k,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut reg = ParamRegistry::new(5);
        let gen = ObjectGenerator::register(&mut reg, &cfg, &mut rng).unwrap();
        (reg, gen)
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn candidate_counts_match_enumeration() {
        assert_eq!(MetaPredicate::TokenPair.candidates(3, 0).len(), 6);
        assert_eq!(MetaPredicate::TokenPatch.candidates(2, 3).len(), 6);
        assert!(MetaPredicate::TokenPair.candidates(1, 4).is_empty());
        for c in MetaPredicate::PatchPair.candidates(0, 4) {
            let Constant::PatchPair(i, j) = c else { panic!() };
            assert_ne!(i, j);
        }
    }

    #[test]
    fn top_k_orders_and_breaks_ties_low() {
        assert_eq!(top_k(&[3.0, 1.0, 2.0], 2), vec![0, 2]);
        assert_eq!(top_k(&[1.0, 5.0, 5.0, 0.0], 2), vec![1, 2]);
        assert_eq!(top_k(&[0.5, 2.0], 5), vec![1, 0, 1, 1, 1]);
        assert_eq!(top_k(&[4.0, 4.0, 4.0], 3), vec![0, 1, 2]);
    }

    #[test]
    fn zero_pair_gives_zero_object() {
        let (reg, gen) = setup(4, 2);
        let t = Tensor::zeros(2, 4);
        let v = Tensor::zeros(1, 4);
        let o = gen.candidate_objects(&reg, MetaPredicate::TokenPair, &t, &v).unwrap();
        assert!(o.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn decomposed_pairs_match_concatenated_formula() {
        let (reg, gen) = setup(5, 2);
        let t = random(3, 5, 1);
        let v = random(4, 5, 2);
        for kind in MetaPredicate::ALL {
            let fast = gen.candidate_objects(&reg, kind, &t, &v).unwrap();
            let constants = kind.candidates(3, 4);
            let w = reg.value(reg.id(&format!("obj.{}.w", kind.key())).unwrap());
            for (row, c) in constants.iter().enumerate() {
                let feat: Vec<f64> = match *c {
                    Constant::Token(i) => t.row_slice(i).to_vec(),
                    Constant::Patch(i) => v.row_slice(i).to_vec(),
                    Constant::TokenPair(i, j) => pair(t.row_slice(i), t.row_slice(j)),
                    Constant::PatchPair(i, j) => pair(v.row_slice(i), v.row_slice(j)),
                    Constant::TokenPatch(i, j) => pair(t.row_slice(i), v.row_slice(j)),
                };
                let slow = Tensor::row(feat).matmul(w).unwrap();
                for (a, b) in slow.data().iter().zip(fast.row_slice(row)) {
                    assert!((a - b).abs() < 1e-12, "{kind} {c}");
                }
            }
        }
    }

    fn pair(a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut out = a.to_vec();
        out.extend_from_slice(b);
        out.extend(a.iter().zip(b).map(|(x, y)| x - y));
        out.extend(a.iter().zip(b).map(|(x, y)| x * y));
        out
    }

    #[test]
    fn selection_keeps_k_rows_and_matches_scores() {
        let (reg, gen) = setup(4, 3);
        let t = random(4, 4, 3);
        let v = random(4, 4, 4);
        for kind in MetaPredicate::ALL {
            let set = gen.select(&reg, kind, &t, &v).unwrap();
            assert_eq!(set.constants.len(), 3);
            assert_eq!(set.embeddings.rows(), 3);
            let all = gen.candidate_objects(&reg, kind, &t, &v).unwrap();
            let scores = gen.score(&reg, kind, &all).unwrap();
            let best = top_k(&scores, 3);
            for (slot, &i) in best.iter().enumerate() {
                assert!((scores[i] - set.scores[slot]).abs() < 1e-12);
                let gate = 1.0 / (1.0 + (-scores[i]).exp());
                for (a, b) in set.embeddings.row_slice(slot).iter().zip(all.row_slice(i)) {
                    assert!((a - b * gate).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn empty_candidates_rejected() {
        let (reg, gen) = setup(4, 2);
        let t = random(1, 4, 0);
        let v = random(4, 4, 1);
        assert!(matches!(
            gen.select(&reg, MetaPredicate::TokenPair, &t, &v),
            Err(Error::NoCandidates("b_tt"))
        ));
    }

    #[test]
    fn scorer_receives_gradient() {
        let (reg, gen) = setup(4, 2);
        let t = random(3, 4, 7);
        let v = random(4, 4, 8);
        let constants = gen.select_constants(&reg, MetaPredicate::TokenPatch, &t, &v).unwrap();
        let mut g = Graph::new();
        let tv = g.constant(t);
        let vv = g.constant(v);
        let (emb, _) = gen
            .objects_on_graph(&mut g, &reg, MetaPredicate::TokenPatch, tv, vv, &constants)
            .unwrap();
        let loss = g.sum(emb);
        g.backward(loss).unwrap();
        let mut reg = reg;
        g.accumulate_param_grads(&mut reg);
        let w2 = reg.id("obj.tv.score.w2").unwrap();
        assert!(reg.get(w2).grad.data().iter().any(|&x| x != 0.0));
    }
}
