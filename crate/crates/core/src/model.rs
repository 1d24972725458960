//! End-to-end forward pass from a sample to per-label head truths, plus
//! model persistence.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamRegistry, Tensor, Var};
use crate::clauses::{Atom, Clause, ClauseGenerator, LabelSpace};
use crate::config::{ModelConfig, TrainConfig};
use crate::crossmodal::{CrossModalGraph, GcnStack};
use crate::data::MultimodalSample;
use crate::encoders::{PatchEncoder, TextEncoder};
use crate::error::{Error, Result};
use crate::logic::{self, Prediction, TruthModel};
use crate::objects::{Constant, MetaPredicate, ObjectGenerator};

pub const ARTIFACT_FORMAT: &str = "clausenet-model";
pub const ARTIFACT_VERSION: u32 = 1;

/// Hard choices made during a forward pass. Replaying them makes the loss a
/// smooth function of the parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    /// Per configured layer, the chosen constants of each kind.
    pub objects: Vec<[Vec<Constant>; 5]>,
    /// Per configured layer and label, the chosen atom positions.
    pub atoms: Vec<Vec<Vec<usize>>>,
}

#[derive(Debug, Clone)]
struct ClauseVars {
    positions: Vec<usize>,
    weights: [Var; 5],
    predicates: Var,
    scores: Var,
    truths: Var,
    conjunction: Var,
}

#[derive(Debug, Clone)]
struct LayerVars {
    layer: usize,
    objects: Var,
    per_label: Vec<ClauseVars>,
}

/// Tape and bookkeeping of one forward pass.
pub struct Forward {
    pub graph: Graph,
    /// `1 x n_labels` head truths.
    pub truths: Var,
    pub selection: Selection,
    layers: Vec<LayerVars>,
}

impl Forward {
    pub fn head_truths(&self) -> Vec<f64> {
        self.graph.value(self.truths).data().to_vec()
    }

    pub fn prediction(&self) -> Prediction {
        Prediction::from_truths(self.head_truths())
    }

    /// Adds the loss for `gold` to the tape and returns it.
    pub fn loss(&mut self, gold: usize) -> Result<Var> {
        logic::nll_on_graph(&mut self.graph, self.truths, gold)
    }

    /// Clause records per configured layer and label.
    pub fn clauses(&self) -> Vec<Vec<Clause>> {
        let g = &self.graph;
        self.layers
            .iter()
            .enumerate()
            .map(|(li, layer)| {
                let k = self.selection.objects[li][0].len();
                let objects = g.value(layer.objects);
                layer
                    .per_label
                    .iter()
                    .enumerate()
                    .map(|(label, cv)| {
                        let scores = g.value(cv.scores).data();
                        let truths = g.value(cv.truths).data();
                        let atoms = cv
                            .positions
                            .iter()
                            .zip(truths)
                            .map(|(&pos, &truth)| {
                                let kind = MetaPredicate::ALL[pos / k];
                                let slot = pos % k;
                                Atom {
                                    kind,
                                    constant: self.selection.objects[li][kind.position()][slot],
                                    position: pos,
                                    score: scores[pos],
                                    truth,
                                    correlation_weights: g.value(cv.weights[kind.position()]).row_slice(slot).to_vec(),
                                    predicate_embedding: g.value(cv.predicates).row_slice(pos).to_vec(),
                                    object_embedding: objects.row_slice(pos).to_vec(),
                                }
                            })
                            .collect();
                        Clause {
                            layer: layer.layer,
                            label,
                            atoms,
                            truth: g.value(cv.conjunction).item(),
                        }
                    })
                    .collect()
            })
            .collect()
    }
}

pub struct Model {
    pub config: ModelConfig,
    pub labels: LabelSpace,
    pub params: ParamRegistry,
    text: TextEncoder,
    patches: PatchEncoder,
    gcn: GcnStack,
    objects: ObjectGenerator,
    clauses: ClauseGenerator,
    truth: TruthModel,
}

impl Model {
    /// Fresh parameters drawn from `seed`.
    pub fn new(config: ModelConfig, labels: Vec<String>, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut reg = ParamRegistry::new(seed);
        let text = TextEncoder::register(&mut reg, &config, &mut rng)?;
        let patches = PatchEncoder::register(&mut reg, &config, &mut rng)?;
        let gcn = GcnStack::register(&mut reg, &config, &mut rng)?;
        let objects = ObjectGenerator::register(&mut reg, &config, &mut rng)?;
        let clauses = ClauseGenerator::register(&mut reg, &config, &mut rng)?;
        let truth = TruthModel::register(&mut reg, &config, &mut rng)?;
        let labels = LabelSpace::register(&mut reg, labels, &config, &mut rng)?;
        Ok(Self {
            config,
            labels,
            params: reg,
            text,
            patches,
            gcn,
            objects,
            clauses,
            truth,
        })
    }

    fn from_registry(config: ModelConfig, labels: Vec<String>, reg: ParamRegistry) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            text: TextEncoder::bind(&reg, &config)?,
            patches: PatchEncoder::bind(&reg, &config)?,
            gcn: GcnStack::bind(&reg, &config)?,
            objects: ObjectGenerator::bind(&reg, &config)?,
            clauses: ClauseGenerator::bind(&reg, &config)?,
            truth: TruthModel::bind(&reg)?,
            labels: LabelSpace::bind(&reg, labels)?,
            config,
            params: reg,
        })
    }

    /// Builds the tape for one sample. With `fixed`, every hard selection is
    /// replayed instead of recomputed.
    pub fn forward(&self, sample: &MultimodalSample, fixed: Option<&Selection>) -> Result<Forward> {
        let cfg = &self.config;
        let reg = &self.params;
        let m = sample.tokens.len();
        let r = cfg.num_patches();
        let mut g = Graph::new();
        let t0 = self.text.encode(&mut g, reg, &sample.tokens)?;
        let v0 = self.patches.encode(&mut g, reg, &sample.patches)?;
        let h0 = g.concat_rows(&[t0, v0])?;
        let cm = CrossModalGraph::build(&sample.dep_edges, m, cfg.z)?;
        let hs = self.gcn.forward(&mut g, reg, h0, &cm.normalized, cfg.max_layer())?;

        let token_rows: Vec<usize> = (0..m).collect();
        let patch_rows: Vec<usize> = (m..m + r).collect();
        let n_labels = self.labels.len();
        let mut selection = Selection {
            objects: Vec::with_capacity(cfg.layers.len()),
            atoms: Vec::with_capacity(cfg.layers.len()),
        };
        let mut layers = Vec::with_capacity(cfg.layers.len());
        let mut heads: Vec<Option<Var>> = vec![None; n_labels];

        for (li, &l) in cfg.layers.iter().enumerate() {
            let h = hs[l];
            let tokens = g.gather_rows(h, &token_rows)?;
            let patches = g.gather_rows(h, &patch_rows)?;
            let constants: [Vec<Constant>; 5] = match fixed {
                Some(sel) => sel.objects.get(li).cloned().ok_or(Error::OutOfRange {
                    what: "selection layer",
                    index: li,
                    len: sel.objects.len(),
                })?,
                None => {
                    let (tv, vv) = (g.value(tokens).clone(), g.value(patches).clone());
                    let mut out: [Vec<Constant>; 5] = Default::default();
                    for kind in MetaPredicate::ALL {
                        out[kind.position()] = self.objects.select_constants(reg, kind, &tv, &vv)?;
                    }
                    out
                }
            };
            let mut blocks = [tokens; 5];
            for kind in MetaPredicate::ALL {
                let (emb, _) =
                    self.objects
                        .objects_on_graph(&mut g, reg, kind, tokens, patches, &constants[kind.position()])?;
                blocks[kind.position()] = emb;
            }
            let all_objects = g.concat_rows(&blocks)?;
            let (text, image) = self.clauses.global_summaries(&mut g, reg, tokens, patches)?;

            let mut per_label = Vec::with_capacity(n_labels);
            let mut atom_sel = Vec::with_capacity(n_labels);
            for (label, head) in heads.iter_mut().enumerate() {
                let y = self.labels.embedding(&mut g, reg, label)?;
                let out = self.clauses.generate(&mut g, reg, &blocks, text, image, y)?;
                let positions = match fixed {
                    Some(sel) => sel
                        .atoms
                        .get(li)
                        .and_then(|a| a.get(label))
                        .cloned()
                        .ok_or(Error::OutOfRange {
                            what: "selection label",
                            index: label,
                            len: n_labels,
                        })?,
                    None => self.clauses.select_atoms(g.value(out.scores).data()),
                };
                let b = g.gather_rows(out.predicates, &positions)?;
                let o = g.gather_rows(all_objects, &positions)?;
                let s_col = g.transpose(out.scores);
                let s = g.gather_rows(s_col, &positions)?;
                let truths = self.truth.atom_truths(&mut g, reg, b, o, s, y)?;
                let conjunction = logic::and_on_graph(&mut g, truths)?;
                *head = Some(match *head {
                    None => conjunction,
                    Some(prev) => logic::or_on_graph(&mut g, prev, conjunction)?,
                });
                per_label.push(ClauseVars {
                    positions: positions.clone(),
                    weights: out.weights,
                    predicates: out.predicates,
                    scores: out.scores,
                    truths,
                    conjunction,
                });
                atom_sel.push(positions);
            }
            selection.objects.push(constants);
            selection.atoms.push(atom_sel);
            layers.push(LayerVars {
                layer: l,
                objects: all_objects,
                per_label,
            });
        }
        let heads: Vec<Var> = heads.into_iter().map(|h| h.expect("layers non-empty")).collect();
        let truths = g.concat_cols(&heads)?;
        Ok(Forward {
            graph: g,
            truths,
            selection,
            layers,
        })
    }

    pub fn predict(&self, sample: &MultimodalSample) -> Result<Prediction> {
        Ok(self.forward(sample, None)?.prediction())
    }

    pub fn to_artifact(&self, train: Option<&TrainConfig>) -> ModelArtifact {
        ModelArtifact {
            format: ARTIFACT_FORMAT.to_string(),
            version: ARTIFACT_VERSION,
            config: self.config.clone(),
            train: train.cloned(),
            labels: self.labels.names().to_vec(),
            params: self
                .params
                .iter()
                .map(|(_, p)| StoredParam {
                    name: p.name.clone(),
                    shape: p.value.shape(),
                    values: p.value.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn from_artifact(artifact: ModelArtifact) -> Result<Self> {
        if artifact.format != ARTIFACT_FORMAT || artifact.version != ARTIFACT_VERSION {
            return Err(Error::Config(format!(
                "unsupported model artifact {} v{}",
                artifact.format, artifact.version
            )));
        }
        let mut reg = ParamRegistry::new(0);
        for p in artifact.params {
            let [rows, cols] = p.shape;
            reg.insert(p.name, Tensor::new(rows, cols, p.values)?)?;
        }
        let model = Self::from_registry(artifact.config, artifact.labels, reg)?;
        // a registry rebuilt from a fresh model must have identical names and shapes
        let reference = Model::new(model.config.clone(), model.labels.names().to_vec(), 0)?;
        if reference.params.len() != model.params.len() {
            return Err(Error::Config("model artifact has unexpected parameters".into()));
        }
        for (_, p) in reference.params.iter() {
            let id = model.params.id(&p.name)?;
            let stored = model.params.value(id).shape();
            if stored != p.value.shape() {
                return Err(Error::ShapeMismatch {
                    op: "load_model",
                    left: stored,
                    right: p.value.shape(),
                });
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path, train: Option<&TrainConfig>) -> Result<()> {
        let text = serde_json::to_string(&self.to_artifact(train))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, Option<TrainConfig>)> {
        let text = std::fs::read_to_string(path)?;
        let artifact: ModelArtifact = serde_json::from_str(&text)?;
        let train = artifact.train.clone();
        Ok((Self::from_artifact(artifact)?, train))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredParam {
    pub name: String,
    pub shape: [usize; 2],
    pub values: Vec<f64>,
}

/// Portable model file: header with the full configuration followed by
/// named, shaped parameter blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub train: Option<TrainConfig>,
    pub labels: Vec<String>,
    pub params: Vec<StoredParam>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};

    fn tiny() -> (Model, Vec<MultimodalSample>) {
        let spec = SyntheticSpec {
            vocab_size: 20,
            z: 2,
            f: 4,
            tokens_min: 3,
            tokens_max: 5,
            seed: 5,
            ..Default::default()
        };
        let data = generate_synthetic(&spec, 4).unwrap();
        let cfg = ModelConfig {
            vocab_size: 20,
            d: 6,
            z: 2,
            f: 4,
            k: 2,
            g: 3,
            beta: 0.25,
            layers: vec![1, 2],
            ..Default::default()
        };
        (Model::new(cfg, spec.labels.clone(), 1).unwrap(), data)
    }

    #[test]
    fn head_truths_in_unit_interval() {
        let (model, data) = tiny();
        for s in &data {
            let f = model.forward(s, None).unwrap();
            let t = f.head_truths();
            assert_eq!(t.len(), 2);
            assert!(t.iter().all(|&x| (0.0..=1.0).contains(&x)));
            let p = f.prediction();
            assert!((p.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn clauses_have_fixed_length_and_consistent_truth() {
        let (model, data) = tiny();
        let f = model.forward(&data[0], None).unwrap();
        let clauses = f.clauses();
        assert_eq!(clauses.len(), 2);
        for layer in &clauses {
            assert_eq!(layer.len(), 2);
            for c in layer {
                assert_eq!(c.atoms.len(), 2);
                let product: f64 = c.atoms.iter().map(|a| a.truth).product();
                assert!((product - c.truth).abs() < 1e-15);
                for a in &c.atoms {
                    assert!((a.correlation_weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }
        let head: Vec<f64> = (0..2)
            .map(|y| logic::t_or(clauses[0][y].truth, clauses[1][y].truth).unwrap())
            .collect();
        for (a, b) in head.iter().zip(f.head_truths()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn replaying_selection_reproduces_forward() {
        let (model, data) = tiny();
        let a = model.forward(&data[1], None).unwrap();
        let b = model.forward(&data[1], Some(&a.selection)).unwrap();
        assert_eq!(a.head_truths(), b.head_truths());
        assert_eq!(a.selection, b.selection);
    }

    #[test]
    fn artifact_round_trip() {
        let (model, data) = tiny();
        let restored = Model::from_artifact(model.to_artifact(None)).unwrap();
        assert_eq!(restored.config, model.config);
        assert_eq!(
            model.forward(&data[2], None).unwrap().head_truths(),
            restored.forward(&data[2], None).unwrap().head_truths()
        );
    }

    #[test]
    fn artifact_with_missing_param_rejected() {
        let (model, _) = tiny();
        let mut art = model.to_artifact(None);
        art.params.pop();
        assert!(Model::from_artifact(art).is_err());
    }
}
