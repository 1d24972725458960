//! Model and training configuration.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters. Stored inside every saved model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Embedding table size; id 0 is reserved for unknown tokens.
    pub vocab_size: usize,
    /// Hidden width of every node embedding.
    pub d: usize,
    /// Patch grid side; an image contributes `z * z` patches.
    pub z: usize,
    /// Width of the raw per-patch feature vectors.
    pub f: usize,
    /// Number of GCN layers.
    pub num_layers: usize,
    /// Objects kept per meta-predicate.
    pub k: usize,
    /// Correlations per meta-predicate bank.
    pub g: usize,
    /// Clause length rate; clauses hold `floor(5 k beta)` atoms.
    pub beta: f64,
    /// GCN iterations whose clauses are disjoined into the head truth.
    pub layers: Vec<usize>,
    /// Adds a `d x d` ReLU layer after the token embedding lookup.
    pub text_mixing: bool,
    /// Patches already hold `d`-wide features and bypass the patch MLP.
    pub precomputed_patches: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 1000,
            d: 200,
            z: 7,
            f: 512,
            num_layers: 2,
            k: 5,
            g: 10,
            beta: 0.1,
            layers: vec![2],
            text_mixing: false,
            precomputed_patches: false,
        }
    }
}

impl ModelConfig {
    pub fn num_patches(&self) -> usize {
        self.z * self.z
    }

    /// Number of atoms per clause, `floor(5 k beta)`.
    pub fn clause_len(&self) -> usize {
        clause_len(self.k, self.beta)
    }

    pub fn max_layer(&self) -> usize {
        self.layers.iter().copied().max().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d", self.d),
            ("z", self.z),
            ("f", self.f),
            ("k", self.k),
            ("g", self.g),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::Config(format!("beta must lie in (0, 1], got {}", self.beta)));
        }
        if self.clause_len() == 0 {
            return Err(Error::Config(format!(
                "clause length floor(5 * {} * {}) is zero",
                self.k, self.beta
            )));
        }
        if self.layers.is_empty() {
            return Err(Error::Config("layers must name at least one GCN iteration".into()));
        }
        if let Some(&l) = self.layers.iter().find(|&&l| l > self.num_layers) {
            return Err(Error::Config(format!(
                "layer {l} exceeds num_layers {}",
                self.num_layers
            )));
        }
        let unique: BTreeSet<_> = self.layers.iter().collect();
        if unique.len() != self.layers.len() {
            return Err(Error::Config("layers contains duplicates".into()));
        }
        if self.precomputed_patches && self.f != self.d {
            return Err(Error::Config(format!(
                "precomputed patches need f == d, got f={} d={}",
                self.f, self.d
            )));
        }
        Ok(())
    }
}

/// `floor(5 k beta)`, guarded against representation error in `beta`.
pub fn clause_len(k: usize, beta: f64) -> usize {
    let raw = 5.0 * k as f64 * beta;
    (raw + 1e-9).floor() as usize
}

/// Optimization settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Non-improving validation epochs tolerated before stopping.
    pub patience: usize,
    /// Fraction of the training data held out when no validation set is given.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 5e-4,
            batch_size: 32,
            epochs: 20,
            patience: 5,
            val_fraction: 0.1,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(Error::Config("lr must be positive".into()));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config("val_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Flat `key = value` run configuration combining both sections.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(flatten)]
    pub model: ModelConfig,
    #[serde(flatten)]
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| toml_error(e, text, origin))?;
        let known = toml::Table::try_from(RunConfig::default()).expect("defaults serialize");
        let key_line = |key: &str| {
            text.lines()
                .position(|l| {
                    let l = l.trim_start();
                    let l = l.strip_prefix('[').unwrap_or(l).trim_start();
                    l.strip_prefix(key)
                        .is_some_and(|rest| rest.trim_start().starts_with(['=', '.', ']']))
                })
                .map_or(1, |i| i + 1)
        };
        if let Some(key) = table.keys().find(|k| !known.contains_key(*k)) {
            return Err(Error::Parse {
                path: origin.to_string(),
                line: key_line(key),
                message: format!("unknown key {key:?}"),
            });
        }
        match table.clone().try_into::<RunConfig>() {
            Ok(cfg) => Ok(cfg),
            Err(e) => {
                // flattened structs drop spans, so retry key by key to locate the culprit
                for (key, value) in &table {
                    let mut single = toml::Table::new();
                    single.insert(key.clone(), value.clone());
                    if let Err(inner) = single.try_into::<RunConfig>() {
                        return Err(Error::Parse {
                            path: origin.to_string(),
                            line: key_line(key),
                            message: format!("{key}: {}", inner.message()),
                        });
                    }
                }
                Err(toml_error(e, text, origin))
            }
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::load_with_keys(path)?.0)
    }

    /// Also returns the keys the file sets explicitly.
    pub fn load_with_keys(path: &Path) -> Result<(Self, BTreeSet<String>)> {
        let text = std::fs::read_to_string(path)?;
        let cfg = Self::parse(&text, &path.display().to_string())?;
        let table: toml::Table = toml::from_str(&text).expect("parsed above");
        Ok((cfg, table.keys().cloned().collect()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }
}

pub(crate) fn toml_error(e: toml::de::Error, text: &str, origin: &str) -> Error {
    let line = e
        .span()
        .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
        .unwrap_or(0);
    Error::Parse {
        path: origin.to_string(),
        line,
        message: e.message().to_string(),
    }
}

/// Parses `"0,1,2"` into a layer list.
pub fn parse_layers(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::Config(format!("invalid layer index {p:?}")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_give_clause_len_two() {
        let cfg = ModelConfig::default();
        assert_eq!((cfg.k, cfg.g, cfg.d, cfg.z, cfg.num_layers), (5, 10, 200, 7, 2));
        assert_eq!(cfg.clause_len(), 2);
        cfg.validate().unwrap();
    }

    #[test]
    fn zero_length_clause_rejected() {
        let cfg = ModelConfig {
            beta: 0.039,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn empty_or_out_of_range_layers_rejected() {
        let mut cfg = ModelConfig {
            layers: vec![],
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        cfg.layers = vec![3];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn flat_file_parses_and_reports_line() {
        let cfg = RunConfig::parse("d = 16\nk = 3\nlayers = [0, 2]\nlr = 0.01\n", "x").unwrap();
        assert_eq!(cfg.model.d, 16);
        assert_eq!(cfg.model.layers, vec![0, 2]);
        assert_eq!(cfg.train.lr, 0.01);
        assert_eq!(cfg.model.g, 10);

        match RunConfig::parse("d = 16\nk = \"three\"\n", "cfg.toml") {
            Err(Error::Parse { path, line, .. }) => {
                assert_eq!(path, "cfg.toml");
                assert_eq!(line, 2);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(matches!(
            RunConfig::parse("d = 4\nbogus = 1\n", "c"),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(
            RunConfig::parse("lr = 0.1\n\n[model]\nd = 4\n", "c"),
            Err(Error::Parse { line: 3, .. })
        ));
        // a key that is a prefix of another line's key is not confused with it
        assert!(matches!(
            RunConfig::parse("kk = 1\nk = 2\nkx = 3\n", "c"),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn layer_list_parsing() {
        assert_eq!(parse_layers("0,1,2").unwrap(), vec![0, 1, 2]);
        assert!(parse_layers("0,x").is_err());
    }
}
