//! Token and patch featurizers producing the initial node embeddings.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Init, ParamId, ParamRegistry, Tensor, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};

/// Reserved id for tokens outside the vocabulary.
pub const UNK: usize = 0;

/// Embedding table with an optional `d x d` ReLU mixing layer.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    vocab_size: usize,
    embed: ParamId,
    mix: Option<(ParamId, ParamId)>,
}

impl TextEncoder {
    pub fn register(reg: &mut ParamRegistry, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let embed = reg.init("text.embed", cfg.vocab_size, cfg.d, Init::UnitNormal, rng)?;
        let mix = if cfg.text_mixing {
            let w = reg.init("text.mix.w", cfg.d, cfg.d, Init::Xavier, rng)?;
            let b = reg.init("text.mix.b", 1, cfg.d, Init::Zeros, rng)?;
            Some((w, b))
        } else {
            None
        };
        Ok(Self {
            vocab_size: cfg.vocab_size,
            embed,
            mix,
        })
    }

    pub fn bind(reg: &ParamRegistry, cfg: &ModelConfig) -> Result<Self> {
        let mix = if cfg.text_mixing {
            Some((reg.id("text.mix.w")?, reg.id("text.mix.b")?))
        } else {
            None
        };
        Ok(Self {
            vocab_size: cfg.vocab_size,
            embed: reg.id("text.embed")?,
            mix,
        })
    }

    /// Ids at or beyond the vocabulary size map to [`UNK`].
    pub fn resolve(&self, tokens: &[usize]) -> Vec<usize> {
        tokens
            .iter()
            .map(|&t| if t < self.vocab_size { t } else { UNK })
            .collect()
    }

    /// `m x d` token representations.
    pub fn encode(&self, graph: &mut Graph, reg: &ParamRegistry, tokens: &[usize]) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::Empty { op: "encode_text" });
        }
        let ids = self.resolve(tokens);
        let table = graph.param(reg, self.embed);
        let rows = graph.gather_rows(table, &ids)?;
        match self.mix {
            None => Ok(rows),
            Some((w, b)) => {
                let w = graph.param(reg, w);
                let b = graph.param(reg, b);
                let h = graph.matmul(rows, w)?;
                let h = graph.add_row(h, b)?;
                Ok(graph.relu(h))
            }
        }
    }
}

/// Two-layer perceptron `f -> d -> d` applied to every patch row.
#[derive(Debug, Clone)]
pub struct PatchEncoder {
    num_patches: usize,
    width: usize,
    layers: Option<[ParamId; 4]>,
}

impl PatchEncoder {
    pub fn register(reg: &mut ParamRegistry, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let layers = if cfg.precomputed_patches {
            None
        } else {
            Some([
                reg.init("patch.w1", cfg.f, cfg.d, Init::Xavier, rng)?,
                reg.init("patch.b1", 1, cfg.d, Init::Zeros, rng)?,
                reg.init("patch.w2", cfg.d, cfg.d, Init::Xavier, rng)?,
                reg.init("patch.b2", 1, cfg.d, Init::Zeros, rng)?,
            ])
        };
        Ok(Self {
            num_patches: cfg.num_patches(),
            width: cfg.f,
            layers,
        })
    }

    pub fn bind(reg: &ParamRegistry, cfg: &ModelConfig) -> Result<Self> {
        let layers = if cfg.precomputed_patches {
            None
        } else {
            Some([
                reg.id("patch.w1")?,
                reg.id("patch.b1")?,
                reg.id("patch.w2")?,
                reg.id("patch.b2")?,
            ])
        };
        Ok(Self {
            num_patches: cfg.num_patches(),
            width: cfg.f,
            layers,
        })
    }

    /// `r x d` patch representations; `patches` must have `z * z` rows.
    pub fn encode(&self, graph: &mut Graph, reg: &ParamRegistry, patches: &Tensor) -> Result<Var> {
        if patches.rows() != self.num_patches || patches.cols() != self.width {
            return Err(Error::ShapeMismatch {
                op: "encode_patches",
                left: patches.shape(),
                right: [self.num_patches, self.width],
            });
        }
        let x = graph.constant(patches.clone());
        let Some([w1, b1, w2, b2]) = self.layers else {
            return Ok(x);
        };
        let (w1, b1) = (graph.param(reg, w1), graph.param(reg, b1));
        let (w2, b2) = (graph.param(reg, w2), graph.param(reg, b2));
        let h = graph.matmul(x, w1)?;
        let h = graph.add_row(h, b1)?;
        let h = graph.relu(h);
        let h = graph.matmul(h, w2)?;
        graph.add_row(h, b2)
    }
}
