//! Samples, JSONL ingestion and the planted-rule synthetic generator.
//!
//! A dataset file `name.jsonl` may sit next to a sidecar `name.meta.json`
//! holding the grid side, patch width, label list and optional vocabulary.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::config::toml_error;
use crate::encoders::UNK;
use crate::error::{Error, Result};

/// Token distance used when a record carries no dependency edges.
pub const DEFAULT_WINDOW: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalSample {
    pub id: String,
    pub tokens: Vec<usize>,
    pub token_surface: Option<Vec<String>>,
    pub dep_edges: Vec<(usize, usize)>,
    /// `z^2 x f` patch features.
    pub patches: Tensor,
    pub label: String,
}

impl MultimodalSample {
    /// Printable form of token `i`.
    pub fn surface(&self, i: usize) -> String {
        match &self.token_surface {
            Some(s) if i < s.len() => s[i].clone(),
            _ => format!("#{}", self.tokens.get(i).copied().unwrap_or(UNK)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub z: usize,
    pub f: usize,
    pub labels: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_size: Option<usize>,
    /// Token strings indexed by id; used when records carry string tokens.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<Vec<String>>,
}

impl DatasetMeta {
    pub fn label_index(&self, label: &str) -> Result<usize> {
        self.labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::UnknownLabel {
                label: label.to_string(),
                known: self.labels.clone(),
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub samples: Vec<MultimodalSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum TokenField {
    Id(usize),
    Word(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    id: String,
    tokens: Vec<TokenField>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    token_surface: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dep_edges: Option<Vec<[usize; 2]>>,
    #[serde(default)]
    patches: Option<Vec<Vec<f64>>>,
    label: String,
}

/// Pairs `(i, j)`, `i < j`, with `j - i <= w`, in lexicographic order.
pub fn window_edges(m: usize, w: usize) -> Vec<(usize, usize)> {
    (0..m)
        .flat_map(|i| (i + 1..m.min(i + w + 1)).map(move |j| (i, j)))
        .collect()
}

/// Sidecar location for a dataset file.
pub fn meta_path(data: &Path) -> PathBuf {
    data.with_extension("meta.json")
}

pub fn read_meta(path: &Path) -> Result<DatasetMeta> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: e.line(),
        message: e.to_string(),
    })
}

/// Loads `path` with the metadata from its sidecar.
pub fn load_jsonl(path: &Path) -> Result<Dataset> {
    let meta_file = meta_path(path);
    if !meta_file.exists() {
        return Err(Error::Config(format!(
            "missing dataset sidecar {}",
            meta_file.display()
        )));
    }
    let meta = read_meta(&meta_file)?;
    let text = std::fs::read_to_string(path)?;
    let samples = parse_jsonl(&text, &meta, &path.display().to_string())?;
    Ok(Dataset { meta, samples })
}

/// Parses JSONL text against `meta`; errors carry 1-based line numbers.
pub fn parse_jsonl(text: &str, meta: &DatasetMeta, origin: &str) -> Result<Vec<MultimodalSample>> {
    let mut samples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fail = |message: String| Error::Parse {
            path: origin.to_string(),
            line: i + 1,
            message,
        };
        let record: SampleRecord = serde_json::from_str(line).map_err(|e| fail(e.to_string()))?;
        samples.push(record_to_sample(record, meta).map_err(|e| match e {
            Error::UnknownLabel { .. } => e,
            other => fail(other.to_string()),
        })?);
    }
    if samples.is_empty() {
        log::warn!("{origin}: dataset is empty");
    }
    Ok(samples)
}

fn record_to_sample(record: SampleRecord, meta: &DatasetMeta) -> Result<MultimodalSample> {
    meta.label_index(&record.label)?;
    if record.tokens.is_empty() {
        return Err(Error::Config(format!("sample {:?} has no tokens", record.id)));
    }
    let mut tokens = Vec::with_capacity(record.tokens.len());
    let mut words = Vec::new();
    for t in &record.tokens {
        match t {
            TokenField::Id(id) => tokens.push(*id),
            TokenField::Word(w) => {
                let vocab = meta.vocab.as_ref().ok_or_else(|| {
                    Error::Config("string tokens need a vocab list in the dataset sidecar".into())
                })?;
                tokens.push(vocab.iter().position(|v| v == w).unwrap_or(UNK));
                words.push(w.clone());
            }
        }
    }
    let token_surface = match record.token_surface {
        Some(s) => Some(s),
        None if words.len() == tokens.len() => Some(words),
        None => None,
    };
    if let Some(s) = &token_surface {
        if s.len() != tokens.len() {
            return Err(Error::Config(format!(
                "token_surface has {} entries for {} tokens",
                s.len(),
                tokens.len()
            )));
        }
    }
    let m = tokens.len();
    let dep_edges = match record.dep_edges {
        Some(edges) => {
            for &[i, j] in &edges {
                if i >= m || j >= m {
                    return Err(Error::OutOfRange {
                        what: "dependency edge endpoint",
                        index: i.max(j),
                        len: m,
                    });
                }
            }
            edges.into_iter().map(|[i, j]| (i, j)).collect()
        }
        None => window_edges(m, DEFAULT_WINDOW),
    };
    let rows = record
        .patches
        .ok_or_else(|| Error::Config(format!("sample {:?} has no patches", record.id)))?;
    let r = meta.z * meta.z;
    if rows.len() != r {
        return Err(Error::Config(format!("expected {r} patch rows, found {}", rows.len())));
    }
    if let Some(bad) = rows.iter().find(|row| row.len() != meta.f) {
        return Err(Error::Config(format!("expected patch width {}, found {}", meta.f, bad.len())));
    }
    Ok(MultimodalSample {
        id: record.id,
        tokens,
        token_surface,
        dep_edges,
        patches: Tensor::from_rows(&rows)?,
        label: record.label,
    })
}

fn sample_to_record(s: &MultimodalSample) -> SampleRecord {
    SampleRecord {
        id: s.id.clone(),
        tokens: s.tokens.iter().map(|&t| TokenField::Id(t)).collect(),
        token_surface: s.token_surface.clone(),
        dep_edges: Some(s.dep_edges.iter().map(|&(i, j)| [i, j]).collect()),
        patches: Some((0..s.patches.rows()).map(|r| s.patches.row_slice(r).to_vec()).collect()),
        label: s.label.clone(),
    }
}

/// One JSON object per line, in sample order.
pub fn to_jsonl(samples: &[MultimodalSample]) -> Result<String> {
    let mut out = String::new();
    for s in samples {
        out.push_str(&serde_json::to_string(&sample_to_record(s))?);
        out.push('\n');
    }
    Ok(out)
}

/// Writes the samples and the sidecar next to them.
pub fn write_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    std::fs::write(path, to_jsonl(&dataset.samples)?)?;
    let mut meta = serde_json::to_string_pretty(&dataset.meta)?;
    meta.push('\n');
    std::fs::write(meta_path(path), meta)?;
    Ok(())
}

/// Generator settings for a binary planted-rule task.
///
/// Positives contain `rule_token` (if set) and at least one patch drawn
/// around prototype `rule_prototype` (if set); negatives violate the rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub vocab_size: usize,
    pub z: usize,
    pub f: usize,
    pub tokens_min: usize,
    pub tokens_max: usize,
    pub rule_token: Option<usize>,
    pub rule_prototype: Option<usize>,
    pub n_prototypes: usize,
    /// Std-dev of the Gaussian jitter around each patch's prototype.
    pub patch_noise: f64,
    /// Probability of flipping the rule-assigned label.
    pub noise: f64,
    /// Probability that the rule assigns the positive label.
    pub balance: f64,
    /// `[negative, positive]`.
    pub labels: Vec<String>,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            vocab_size: 50,
            z: 4,
            f: 8,
            tokens_min: 3,
            tokens_max: 8,
            rule_token: Some(7),
            rule_prototype: Some(0),
            n_prototypes: 4,
            patch_noise: 0.1,
            noise: 0.05,
            balance: 0.5,
            labels: vec!["NonRumor".into(), "Rumor".into()],
            seed: 42,
        }
    }
}

impl SyntheticSpec {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| toml_error(e, text, origin))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: String| Err(Error::Config(format!("{field}: {why}")));
        if self.vocab_size < 3 {
            return bad("vocab_size", format!("needs at least 3 ids, got {}", self.vocab_size));
        }
        if self.z == 0 || self.f == 0 {
            return bad("z", "grid side and patch width must be positive".into());
        }
        if self.tokens_min < 2 {
            return bad("tokens_min", "token pairs need at least 2 tokens".into());
        }
        if self.tokens_max < self.tokens_min {
            return bad("tokens_max", format!("{} is below tokens_min {}", self.tokens_max, self.tokens_min));
        }
        if self.n_prototypes < 2 {
            return bad("n_prototypes", "needs the rule prototype plus a distractor".into());
        }
        match self.rule_token {
            Some(t) if t == UNK || t >= self.vocab_size => {
                return bad("rule_token", format!("{t} is outside 1..{}", self.vocab_size));
            }
            _ => {}
        }
        if let Some(p) = self.rule_prototype {
            if p >= self.n_prototypes {
                return bad("rule_prototype", format!("{p} is not below n_prototypes {}", self.n_prototypes));
            }
        }
        if self.rule_token.is_none() && self.rule_prototype.is_none() {
            return bad("rule_token", "a rule needs a token, a prototype, or both".into());
        }
        if !(0.0..0.5).contains(&self.noise) {
            return bad("noise", format!("{} is outside [0, 0.5)", self.noise));
        }
        if !(0.0..=1.0).contains(&self.balance) {
            return bad("balance", format!("{} is outside [0, 1]", self.balance));
        }
        if !(self.patch_noise >= 0.0 && self.patch_noise.is_finite()) {
            return bad("patch_noise", format!("{} must be finite and nonnegative", self.patch_noise));
        }
        if self.labels.len() != 2 || self.labels[0] == self.labels[1] {
            return bad("labels", "exactly two distinct labels are required".into());
        }
        Ok(())
    }

    pub fn meta(&self) -> DatasetMeta {
        DatasetMeta {
            z: self.z,
            f: self.f,
            labels: self.labels.clone(),
            vocab_size: Some(self.vocab_size),
            vocab: None,
        }
    }

    /// `n_prototypes x f` patch centres; the first draws from the seed.
    pub fn prototypes(&self) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        prototypes(self, &mut rng)
    }

    /// Whether `sample` satisfies the planted rule, assigning each patch to
    /// its nearest prototype.
    pub fn rule_holds(&self, sample: &MultimodalSample, prototypes: &Tensor) -> bool {
        let token_ok = self.rule_token.is_none_or(|t| sample.tokens.contains(&t));
        let patch_ok = self
            .rule_prototype
            .is_none_or(|p| (0..sample.patches.rows()).any(|q| nearest_prototype(sample.patches.row_slice(q), prototypes) == p));
        token_ok && patch_ok
    }
}

fn prototypes(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..spec.n_prototypes * spec.f).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(spec.n_prototypes, spec.f, data).expect("sized")
}

/// Index of the closest prototype row in squared distance.
pub fn nearest_prototype(x: &[f64], prototypes: &Tensor) -> usize {
    let dist = |p: usize| -> f64 {
        x.iter()
            .zip(prototypes.row_slice(p))
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    };
    let mut best = 0;
    for p in 1..prototypes.rows() {
        if dist(p) < dist(best) {
            best = p;
        }
    }
    best
}

/// Draws `n` samples; a pure function of `(spec, n)`.
pub fn generate_synthetic(spec: &SyntheticSpec, n: usize) -> Result<Vec<MultimodalSample>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Config("sample count must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let protos = prototypes(spec, &mut rng);
    let r = spec.z * spec.z;
    let fillers: Vec<usize> = (1..spec.vocab_size).filter(|&t| Some(t) != spec.rule_token).collect();
    let distractors: Vec<usize> = (0..spec.n_prototypes).filter(|&p| Some(p) != spec.rule_prototype).collect();
    let width = (n.max(1) - 1).to_string().len().max(5);

    let mut samples = Vec::with_capacity(n);
    for index in 0..n {
        let positive = rng.gen_bool(spec.balance);
        let (want_token, want_patch) = if positive {
            (spec.rule_token.is_some(), spec.rule_prototype.is_some())
        } else {
            // a negative drops at least one rule component
            let mut options = vec![(false, false)];
            if spec.rule_token.is_some() && spec.rule_prototype.is_some() {
                options.push((true, false));
                options.push((false, true));
            }
            *options.choose(&mut rng).expect("non-empty")
        };

        let m = rng.gen_range(spec.tokens_min..=spec.tokens_max);
        let mut tokens: Vec<usize> = (0..m).map(|_| *fillers.choose(&mut rng).expect("fillers")).collect();
        if want_token {
            let at = rng.gen_range(0..m);
            tokens[at] = spec.rule_token.expect("token rule");
        }

        let mut centres: Vec<usize> = (0..r).map(|_| *distractors.choose(&mut rng).expect("distractors")).collect();
        if want_patch {
            let count = rng.gen_range(1..=3.min(r));
            let mut slots: Vec<usize> = (0..r).collect();
            slots.shuffle(&mut rng);
            for &q in &slots[..count] {
                centres[q] = spec.rule_prototype.expect("patch rule");
            }
        }
        let mut patches = Tensor::zeros(r, spec.f);
        for (q, &c) in centres.iter().enumerate() {
            for (x, &p) in patches.row_slice_mut(q).iter_mut().zip(protos.row_slice(c)) {
                let jitter: f64 = rng.sample(StandardNormal);
                *x = p + spec.patch_noise * jitter;
            }
        }

        let flipped = rng.gen_bool(spec.noise);
        let label = &spec.labels[usize::from(positive != flipped)];
        let mut id = String::new();
        write!(id, "s{index:0width$}").expect("string write");
        samples.push(MultimodalSample {
            id,
            dep_edges: (1..m).map(|i| (i - 1, i)).collect(),
            tokens,
            token_surface: None,
            patches,
            label: label.clone(),
        });
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta() -> DatasetMeta {
        DatasetMeta {
            z: 1,
            f: 2,
            labels: vec!["a".into(), "b".into()],
            vocab_size: None,
            vocab: Some(vec!["<unk>".into(), "hello".into(), "world".into()]),
        }
    }

    #[test]
    fn window_of_three() {
        assert_eq!(window_edges(3, 2), vec![(0, 1), (0, 2), (1, 2)]);
        assert_eq!(window_edges(1, 2), vec![]);
        assert_eq!(window_edges(4, 1), vec![(0, 1), (1, 2), (2, 3)]);
    }

    #[test]
    fn missing_edges_fall_back_to_window() {
        let text = r#"{"id":"x","tokens":[1,2,3],"patches":[[0.0,1.0]],"label":"a"}"#;
        let s = parse_jsonl(text, &meta(), "t").unwrap();
        assert_eq!(s[0].dep_edges, vec![(0, 1), (0, 2), (1, 2)]);
    }

    #[test]
    fn explicit_edges_kept() {
        let text = r#"{"id":"x","tokens":[1,2,3],"dep_edges":[[2,0]],"patches":[[0.0,1.0]],"label":"a"}"#;
        let s = parse_jsonl(text, &meta(), "t").unwrap();
        assert_eq!(s[0].dep_edges, vec![(2, 0)]);
    }

    #[test]
    fn string_tokens_use_vocab() {
        let text = r#"{"id":"x","tokens":["hello","moon"],"patches":[[0.0,1.0]],"label":"b"}"#;
        let s = parse_jsonl(text, &meta(), "t").unwrap();
        assert_eq!(s[0].tokens, vec![1, UNK]);
        assert_eq!(s[0].surface(1), "moon");
    }

    #[test]
    fn malformed_line_reports_number() {
        let text = "{\"id\":\"x\",\"tokens\":[1],\"patches\":[[0.0,1.0]],\"label\":\"a\"}\n{oops\n";
        match parse_jsonl(text, &meta(), "d.jsonl") {
            Err(Error::Parse { line, path, .. }) => assert_eq!((line, path.as_str()), (2, "d.jsonl")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_patches_rejected() {
        let text = r#"{"id":"x","tokens":[1],"label":"a"}"#;
        assert!(matches!(parse_jsonl(text, &meta(), "t"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn unknown_label_lists_known() {
        let text = r#"{"id":"x","tokens":[1],"patches":[[0.0,1.0]],"label":"zzz"}"#;
        match parse_jsonl(text, &meta(), "t") {
            Err(Error::UnknownLabel { known, .. }) => assert_eq!(known, vec!["a", "b"]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_text_is_empty_dataset() {
        assert!(parse_jsonl("", &meta(), "t").unwrap().is_empty());
    }

    #[test]
    fn noiseless_rule_consistent() {
        let spec = SyntheticSpec {
            noise: 0.0,
            patch_noise: 0.0,
            ..Default::default()
        };
        let protos = spec.prototypes();
        for s in generate_synthetic(&spec, 300).unwrap() {
            let positive = s.label == spec.labels[1];
            assert_eq!(spec.rule_holds(&s, &protos), positive, "{}", s.id);
            assert_eq!(s.tokens.contains(&7), positive || s.tokens.contains(&7));
        }
    }

    #[test]
    fn token_only_rule_consistent() {
        let spec = SyntheticSpec {
            noise: 0.0,
            rule_prototype: None,
            ..Default::default()
        };
        for s in generate_synthetic(&spec, 200).unwrap() {
            assert_eq!(s.tokens.contains(&7), s.label == "Rumor");
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let spec = SyntheticSpec::default();
        let a = to_jsonl(&generate_synthetic(&spec, 20).unwrap()).unwrap();
        let b = to_jsonl(&generate_synthetic(&spec, 20).unwrap()).unwrap();
        assert_eq!(a, b);
        let other = SyntheticSpec { seed: 43, ..spec };
        assert_ne!(a, to_jsonl(&generate_synthetic(&other, 20).unwrap()).unwrap());
    }

    #[test]
    fn balance_within_binomial_interval() {
        let spec = SyntheticSpec {
            noise: 0.0,
            ..Default::default()
        };
        let pos = generate_synthetic(&spec, 1000)
            .unwrap()
            .iter()
            .filter(|s| s.label == "Rumor")
            .count();
        assert!((459..=541).contains(&pos), "{pos}");
    }

    #[test]
    fn inconsistent_specs_rejected() {
        let cases = [
            SyntheticSpec {
                rule_token: Some(50),
                ..Default::default()
            },
            SyntheticSpec {
                noise: 0.5,
                ..Default::default()
            },
            SyntheticSpec {
                rule_prototype: Some(4),
                ..Default::default()
            },
            SyntheticSpec {
                tokens_min: 1,
                ..Default::default()
            },
        ];
        for spec in cases {
            assert!(generate_synthetic(&spec, 1).is_err(), "{spec:?}");
        }
    }

    #[test]
    fn spec_file_names_bad_field() {
        let err = SyntheticSpec::parse("noise = 0.7\n", "s.toml").unwrap_err();
        assert!(err.to_string().contains("noise"), "{err}");
        let err = SyntheticSpec::parse("colour = 1\n", "s.toml").unwrap_err();
        assert!(err.to_string().contains("colour"), "{err}");
    }

    #[test]
    fn round_trip_preserves_records() {
        let spec = SyntheticSpec::default();
        let samples = generate_synthetic(&spec, 10).unwrap();
        let text = to_jsonl(&samples).unwrap();
        assert_eq!(parse_jsonl(&text, &spec.meta(), "t").unwrap(), samples);
    }
}
