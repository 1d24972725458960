//! Predicate embeddings from correlation banks, atom scoring and clause
//! assembly.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Init, ParamId, ParamRegistry, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::objects::{top_k, Constant, MetaPredicate};

/// Ordered label names with one trainable `d`-dim embedding each.
#[derive(Debug, Clone)]
pub struct LabelSpace {
    names: Vec<String>,
    embeddings: ParamId,
}

impl LabelSpace {
    pub fn register(
        reg: &mut ParamRegistry,
        names: Vec<String>,
        cfg: &ModelConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Self::check(&names)?;
        let embeddings = reg.init("labels", names.len(), cfg.d, Init::UnitNormal, rng)?;
        Ok(Self { names, embeddings })
    }

    pub fn bind(reg: &ParamRegistry, names: Vec<String>) -> Result<Self> {
        Self::check(&names)?;
        Ok(Self {
            names,
            embeddings: reg.id("labels")?,
        })
    }

    fn check(names: &[String]) -> Result<()> {
        if names.len() < 2 {
            return Err(Error::Config("at least two labels are required".into()));
        }
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(Error::Config(format!("duplicate label {n:?}")));
            }
        }
        Ok(())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, label: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == label)
            .ok_or_else(|| Error::UnknownLabel {
                label: label.to_string(),
                known: self.names.clone(),
            })
    }

    /// `1 x d` embedding of label `index`.
    pub fn embedding(&self, graph: &mut Graph, reg: &ParamRegistry, index: usize) -> Result<Var> {
        let table = graph.param(reg, self.embeddings);
        graph.gather_rows(table, &[index])
    }
}

/// One selected body atom of a clause.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub kind: MetaPredicate,
    pub constant: Constant,
    /// Row in the stacked `5k` predicate matrix.
    pub position: usize,
    /// Selection score `s` from the final sparse attention.
    pub score: f64,
    /// Truth value `μ` of the instantiated atom.
    pub truth: f64,
    /// Sparse mixing weights over the kind's correlation bank.
    pub correlation_weights: Vec<f64>,
    pub predicate_embedding: Vec<f64>,
    pub object_embedding: Vec<f64>,
}

/// Conjunctive clause derived at one GCN layer for one label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clause {
    pub layer: usize,
    pub label: usize,
    pub atoms: Vec<Atom>,
    /// Product t-norm of the atom truths.
    pub truth: f64,
}

#[derive(Debug, Clone, Copy)]
struct Bank {
    correlations: ParamId,
    mixing: ParamId,
}

/// Differentiable outputs of clause generation for one (layer, label).
#[derive(Debug, Clone, Copy)]
pub struct AtomScores {
    /// `5k x d` stacked predicate embeddings.
    pub predicates: Var,
    /// `k x g` correlation weights per kind, in [`MetaPredicate::ALL`] order.
    pub weights: [Var; 5],
    /// `1 x 5k` input-conditioned attention.
    pub input_attention: Var,
    /// `1 x 5k` label-conditioned attention.
    pub label_attention: Var,
    /// `1 x 5k` final atom scores.
    pub scores: Var,
}

#[derive(Debug, Clone)]
pub struct ClauseGenerator {
    banks: [Bank; 5],
    text_attention: ParamId,
    image_attention: ParamId,
    input_proj: ParamId,
    label_proj: ParamId,
    k: usize,
    clause_len: usize,
}

impl ClauseGenerator {
    pub fn register(reg: &mut ParamRegistry, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let d = cfg.d;
        let mut banks = Vec::with_capacity(5);
        for kind in MetaPredicate::ALL {
            let key = &kind.symbol()[2..];
            banks.push(Bank {
                correlations: reg.init(format!("corr.{key}"), cfg.g, d, Init::Embedding, rng)?,
                mixing: reg.init(format!("corr.{key}.mix"), 2 * d, d, Init::Xavier, rng)?,
            });
        }
        Ok(Self {
            banks: banks.try_into().expect("five banks"),
            text_attention: reg.init("summary.text", d, 1, Init::Xavier, rng)?,
            image_attention: reg.init("summary.image", d, 1, Init::Xavier, rng)?,
            input_proj: reg.init("atoms.input", d, 2 * d, Init::Xavier, rng)?,
            label_proj: reg.init("atoms.label", 4 * d, 1, Init::Xavier, rng)?,
            k: cfg.k,
            clause_len: cfg.clause_len(),
        })
    }

    pub fn bind(reg: &ParamRegistry, cfg: &ModelConfig) -> Result<Self> {
        let mut banks = Vec::with_capacity(5);
        for kind in MetaPredicate::ALL {
            let key = &kind.symbol()[2..];
            banks.push(Bank {
                correlations: reg.id(&format!("corr.{key}"))?,
                mixing: reg.id(&format!("corr.{key}.mix"))?,
            });
        }
        Ok(Self {
            banks: banks.try_into().expect("five banks"),
            text_attention: reg.id("summary.text")?,
            image_attention: reg.id("summary.image")?,
            input_proj: reg.id("atoms.input")?,
            label_proj: reg.id("atoms.label")?,
            k: cfg.k,
            clause_len: cfg.clause_len(),
        })
    }

    pub fn clause_len(&self) -> usize {
        self.clause_len
    }

    /// `B = sparsemax([Ô, y] W^e Cᵀ) C` for one kind. Returns the `k x d`
    /// predicate embeddings and the `k x g` mixing weights.
    pub fn predicate_embeddings(
        &self,
        graph: &mut Graph,
        reg: &ParamRegistry,
        kind: MetaPredicate,
        objects: Var,
        label: Var,
    ) -> Result<(Var, Var)> {
        let bank = self.banks[kind.position()];
        let [rows, d] = graph.shape(objects);
        let y = graph.broadcast(label, rows, d)?;
        let x = graph.concat_cols(&[objects, y])?;
        let mix = graph.param(reg, bank.mixing);
        let c = graph.param(reg, bank.correlations);
        let ct = graph.transpose(c);
        let h = graph.matmul(x, mix)?;
        let logits = graph.matmul(h, ct)?;
        let weights = graph.sparsemax_rows(logits)?;
        let b = graph.matmul(weights, c)?;
        Ok((b, weights))
    }

    /// Attention-weighted summaries `t_T = Tᵀ softmax(T W_T)` and
    /// `v_I = Vᵀ softmax(V W_I)`, each `1 x d`.
    pub fn global_summaries(
        &self,
        graph: &mut Graph,
        reg: &ParamRegistry,
        tokens: Var,
        patches: Var,
    ) -> Result<(Var, Var)> {
        let summarize = |graph: &mut Graph, x: Var, w: ParamId| -> Result<Var> {
            let w = graph.param(reg, w);
            let logits = graph.matmul(x, w)?;
            let logits = graph.transpose(logits);
            let attn = graph.softmax_rows(logits)?;
            graph.matmul(attn, x)
        };
        let t = summarize(graph, tokens, self.text_attention)?;
        let v = summarize(graph, patches, self.image_attention)?;
        Ok((t, v))
    }

    /// `S = sparsemax(S_{T,I} ∘ S_y)` with
    /// `S_{T,I} = sparsemax(B W_{T,I} [t_T, v_I])` and
    /// `S_y = sparsemax([B, y, B-y, B∘y] W_y)`.
    pub fn score_atoms(
        &self,
        graph: &mut Graph,
        reg: &ParamRegistry,
        predicates: Var,
        text: Var,
        image: Var,
        label: Var,
    ) -> Result<(Var, Var, Var)> {
        let [n, d] = graph.shape(predicates);
        let context = graph.concat_cols(&[text, image])?;
        let context = graph.transpose(context);
        let w_in = graph.param(reg, self.input_proj);
        let h = graph.matmul(predicates, w_in)?;
        let logits = graph.matmul(h, context)?;
        let logits = graph.transpose(logits);
        let input_attention = graph.sparsemax_rows(logits)?;

        let y = graph.broadcast(label, n, d)?;
        let diff = graph.sub(predicates, y)?;
        let prod = graph.mul(predicates, y)?;
        let features = graph.concat_cols(&[predicates, y, diff, prod])?;
        let w_y = graph.param(reg, self.label_proj);
        let logits = graph.matmul(features, w_y)?;
        let logits = graph.transpose(logits);
        let label_attention = graph.sparsemax_rows(logits)?;

        let joint = graph.mul(input_attention, label_attention)?;
        let scores = graph.sparsemax_rows(joint)?;
        Ok((input_attention, label_attention, scores))
    }

    /// Predicate embeddings for the five object sets followed by atom scoring.
    pub fn generate(
        &self,
        graph: &mut Graph,
        reg: &ParamRegistry,
        objects: &[Var; 5],
        text: Var,
        image: Var,
        label: Var,
    ) -> Result<AtomScores> {
        let mut blocks = Vec::with_capacity(5);
        let mut weights = Vec::with_capacity(5);
        for kind in MetaPredicate::ALL {
            let (b, w) = self.predicate_embeddings(graph, reg, kind, objects[kind.position()], label)?;
            blocks.push(b);
            weights.push(w);
        }
        let predicates = graph.concat_rows(&blocks)?;
        let (input_attention, label_attention, scores) =
            self.score_atoms(graph, reg, predicates, text, image, label)?;
        Ok(AtomScores {
            predicates,
            weights: weights.try_into().expect("five kinds"),
            input_attention,
            label_attention,
            scores,
        })
    }

    /// Positions of the `floor(5k beta)` highest-scoring atoms.
    pub fn select_atoms(&self, scores: &[f64]) -> Vec<usize> {
        top_k(scores, self.clause_len.min(scores.len()))
    }

    /// Kind and slot of a stacked atom position.
    pub fn locate(&self, position: usize) -> (MetaPredicate, usize) {
        (MetaPredicate::ALL[position / self.k], position % self.k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use rand::{Rng, SeedableRng};

    fn setup(d: usize, k: usize, g: usize, beta: f64) -> (ParamRegistry, ClauseGenerator, LabelSpace) {
        let cfg = ModelConfig {
            d,
            k,
            g,
            beta,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut reg = ParamRegistry::new(9);
        let gen = ClauseGenerator::register(&mut reg, &cfg, &mut rng).unwrap();
        let labels = LabelSpace::register(&mut reg, vec!["NonRumor".into(), "Rumor".into()], &cfg, &mut rng).unwrap();
        (reg, gen, labels)
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn single_correlation_is_copied() {
        let (reg, gen, labels) = setup(4, 3, 1, 0.2);
        let mut g = Graph::new();
        let o = g.constant(random(3, 4, 1));
        let y = labels.embedding(&mut g, &reg, 1).unwrap();
        let (b, w) = gen.predicate_embeddings(&mut g, &reg, MetaPredicate::Token, o, y).unwrap();
        assert!(g.value(w).data().iter().all(|&x| x == 1.0));
        let c = reg.value(reg.id("corr.t").unwrap());
        for r in 0..3 {
            assert_eq!(g.value(b).row_slice(r), c.row_slice(0));
        }
    }

    #[test]
    fn predicate_rows_are_convex_combinations() {
        let (mut reg, gen, labels) = setup(4, 3, 5, 0.2);
        // spread the bank out so the sparsemax is not uniform
        let id = reg.id("corr.v").unwrap();
        reg.get_mut(id).value = random(5, 4, 3).map(|x| 3.0 * x);
        let mut g = Graph::new();
        let o = g.constant(random(3, 4, 2));
        let y = labels.embedding(&mut g, &reg, 0).unwrap();
        let (b, w) = gen.predicate_embeddings(&mut g, &reg, MetaPredicate::Patch, o, y).unwrap();
        let c = reg.value(id);
        for r in 0..3 {
            let weights = g.value(w).row_slice(r);
            assert!(weights.iter().all(|&x| x >= 0.0));
            assert!((weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let rebuilt = Tensor::row(weights.to_vec()).matmul(c).unwrap();
            for (a, e) in rebuilt.data().iter().zip(g.value(b).row_slice(r)) {
                assert!((a - e).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn summaries_of_single_or_identical_rows() {
        let (reg, gen, _) = setup(3, 2, 2, 0.2);
        let mut g = Graph::new();
        let single = g.constant(Tensor::row(vec![0.3, -1.0, 2.0]));
        let same = g.constant(Tensor::from_rows(&[[1.0, 2.0, 3.0]; 4]).unwrap());
        let (t, v) = gen.global_summaries(&mut g, &reg, single, same).unwrap();
        assert_eq!(g.value(t).data(), &[0.3, -1.0, 2.0]);
        for (a, b) in g.value(v).data().iter().zip([1.0, 2.0, 3.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_attention_weights_average() {
        let (mut reg, gen, _) = setup(2, 2, 2, 0.2);
        let id = reg.id("summary.text").unwrap();
        reg.get_mut(id).value.fill(0.0);
        let mut g = Graph::new();
        let t = g.constant(Tensor::from_rows(&[[1.0, 0.0], [3.0, 2.0]]).unwrap());
        let (s, _) = gen.global_summaries(&mut g, &reg, t, t).unwrap();
        assert_eq!(g.value(s).data(), &[2.0, 1.0]);
    }

    #[test]
    fn scores_are_distribution_within_joint_support() {
        let (reg, gen, labels) = setup(4, 5, 3, 0.1);
        let mut g = Graph::new();
        let objects: [Var; 5] = std::array::from_fn(|i| g.constant(random(5, 4, 10 + i as u64).map(|x| 4.0 * x)));
        let t = g.constant(random(1, 4, 20));
        let v = g.constant(random(1, 4, 21));
        let y = labels.embedding(&mut g, &reg, 1).unwrap();
        let out = gen.generate(&mut g, &reg, &objects, t, v, y).unwrap();
        assert_eq!(g.shape(out.predicates), [25, 4]);
        let s = g.value(out.scores).data();
        assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let (a, b) = (g.value(out.input_attention).data(), g.value(out.label_attention).data());
        let joint_positive = (0..25).any(|i| a[i] * b[i] > 0.0);
        if joint_positive {
            for i in 0..25 {
                if a[i] == 0.0 || b[i] == 0.0 {
                    assert_eq!(s[i], 0.0, "atom {i} outside joint support");
                }
            }
        }
    }

    #[test]
    fn identical_predicates_score_uniformly() {
        let (reg, gen, labels) = setup(3, 5, 2, 0.1);
        let mut g = Graph::new();
        let b = g.constant(Tensor::from_rows(&vec![[0.5, -0.2, 0.1]; 25]).unwrap());
        let t = g.constant(random(1, 3, 1));
        let v = g.constant(random(1, 3, 2));
        let y = labels.embedding(&mut g, &reg, 0).unwrap();
        let (_, _, s) = gen.score_atoms(&mut g, &reg, b, t, v, y).unwrap();
        for &x in g.value(s).data() {
            assert!((x - 1.0 / 25.0).abs() < 1e-12);
        }
    }

    #[test]
    fn clause_length_follows_beta() {
        let (_, gen, _) = setup(3, 5, 2, 0.1);
        assert_eq!(gen.clause_len(), 2);
        let mut s = vec![0.0; 25];
        s[17] = 1.0;
        assert_eq!(gen.select_atoms(&s)[0], 17);
        assert_eq!(gen.locate(17), (MetaPredicate::PatchPair, 2));
    }

    #[test]
    fn label_lookup_errors_list_known() {
        let (_, _, labels) = setup(3, 5, 2, 0.1);
        assert_eq!(labels.index_of("Rumor").unwrap(), 1);
        match labels.index_of("Satire") {
            Err(Error::UnknownLabel { known, .. }) => assert_eq!(known.len(), 2),
            other => panic!("unexpected {other:?}"),
        }
    }
}
