//! Central finite-difference verification of the full-model gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::ParamRegistry;
use crate::config::ModelConfig;
use crate::data::{generate_synthetic, MultimodalSample, SyntheticSpec};
use crate::error::Result;
use crate::model::{Model, Selection};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor so that two vanishing gradients compare as equal.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub probes: Vec<Probe>,
    pub max_rel_error: f64,
    pub worst_param: Option<String>,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn summary(&self) -> String {
        format!(
            "{} probes, max relative error {:.3e} (worst: {}), tolerance {:.0e}: {}",
            self.probes.len(),
            self.max_rel_error,
            self.worst_param.as_deref().unwrap_or("-"),
            self.tolerance,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Mean loss over `samples` with every hard choice replayed from `masks`.
fn masked_loss(model: &Model, samples: &[(usize, &MultimodalSample)], masks: &[Selection]) -> Result<f64> {
    let mut total = 0.0;
    for ((gold, s), mask) in samples.iter().zip(masks) {
        let mut f = model.forward(s, Some(mask))?;
        let l = f.loss(*gold)?;
        total += f.graph.value(l).item();
    }
    Ok(total / samples.len() as f64)
}

/// Compares analytic and central-difference gradients of the mean loss on
/// `n_probes` parameter entries, each picked by choosing a parameter
/// uniformly and then an entry uniformly.
pub fn grad_check(model: &mut Model, samples: &[MultimodalSample], n_probes: usize, seed: u64) -> Result<GradCheckReport> {
    let labelled: Vec<(usize, &MultimodalSample)> = samples
        .iter()
        .map(|s| Ok((model.labels.index_of(&s.label)?, s)))
        .collect::<Result<_>>()?;
    let masks: Vec<Selection> = samples
        .iter()
        .map(|s| Ok(model.forward(s, None)?.selection))
        .collect::<Result<_>>()?;

    model.params.zero_grad();
    let scale = 1.0 / labelled.len() as f64;
    for ((gold, s), mask) in labelled.iter().zip(&masks) {
        let mut f = model.forward(s, Some(mask))?;
        let l = f.loss(*gold)?;
        let l = f.graph.scale(l, scale);
        f.graph.backward(l)?;
        f.graph.accumulate_param_grads(&mut model.params);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = model.params.iter().map(|(id, _)| id).collect();
    let mut probes = Vec::with_capacity(n_probes);
    for _ in 0..n_probes {
        let id = ids[rng.gen_range(0..ids.len())];
        let index = rng.gen_range(0..model.params.value(id).len());
        let analytic = model.params.get(id).grad.data()[index];
        let original = model.params.value(id).data()[index];
        let loss_at = |model: &mut Model, w: f64| -> Result<f64> {
            model.params.get_mut(id).value.data_mut()[index] = w;
            masked_loss(model, &labelled, &masks)
        };
        let plus = loss_at(model, original + STEP)?;
        let minus = loss_at(model, original - STEP)?;
        model.params.get_mut(id).value.data_mut()[index] = original;
        let numeric = (plus - minus) / (2.0 * STEP);
        probes.push(Probe {
            param: model.params.get(id).name.clone(),
            index,
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric),
        });
    }
    let worst = probes.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error));
    let max_rel_error = worst.map_or(0.0, |p| p.rel_error);
    Ok(GradCheckReport {
        worst_param: worst.map(|p| p.param.clone()),
        max_rel_error,
        tolerance: TOLERANCE,
        passed: max_rel_error < TOLERANCE,
        probes,
    })
}

/// Small model used by the gradient check: `d = 8`, four tokens, a `2 x 2`
/// grid, `k = 2`, `g = 3`, `beta = 0.25` and every GCN iteration disjoined.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 20,
        d: 8,
        z: 2,
        f: 4,
        num_layers: 2,
        k: 2,
        g: 3,
        beta: 0.25,
        layers: vec![0, 1, 2],
        text_mixing: true,
        precomputed_patches: false,
    }
}

/// A fresh model for `cfg` and `n` synthetic four-token samples.
pub fn setup(cfg: &ModelConfig, n: usize, seed: u64) -> Result<(Model, Vec<MultimodalSample>)> {
    let spec = SyntheticSpec {
        vocab_size: cfg.vocab_size.max(3),
        z: cfg.z,
        f: cfg.f,
        tokens_min: 4,
        tokens_max: 4,
        rule_token: Some(1),
        rule_prototype: Some(0),
        noise: 0.0,
        seed,
        ..Default::default()
    };
    let samples = generate_synthetic(&spec, n)?;
    let model = Model::new(cfg.clone(), spec.labels.clone(), seed)?;
    Ok((model, samples))
}

/// Largest absolute gradient entry, for diagnostics.
pub fn max_abs_grad(reg: &ParamRegistry) -> f64 {
    reg.iter()
        .flat_map(|(_, p)| p.grad.data().iter().map(|g| g.abs()))
        .fold(0.0, f64::max)
}
