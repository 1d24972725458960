//! Adam with decoupled weight decay, the epoch loop with early stopping, and
//! classification metrics.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamRegistry, Tensor};
use crate::config::TrainConfig;
use crate::data::MultimodalSample;
use crate::error::{Error, Result};
use crate::model::Model;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam moments for every parameter of one registry.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub weight_decay: f64,
    step: i32,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub fn new(reg: &ParamRegistry, lr: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Tensor> = reg
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.rows(), p.value.cols()))
            .collect();
        Self {
            lr,
            weight_decay,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// Applies one update from the accumulated gradients. A non-finite
    /// gradient leaves every parameter and moment untouched.
    pub fn step(&mut self, reg: &mut ParamRegistry) -> Result<()> {
        if let Some((_, p)) = reg.iter().find(|(_, p)| !p.grad.is_finite()) {
            log::error!("non-finite gradient in {}; step skipped", p.name);
            return Err(Error::NonFiniteGradient(p.name.clone()));
        }
        self.step += 1;
        let c1 = 1.0 - BETA1.powi(self.step);
        let c2 = 1.0 - BETA2.powi(self.step);
        let decay = self.lr * self.weight_decay;
        for ((p, m), v) in reg.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let grads = p.grad.data();
            let values = p.value.data_mut();
            for (((w, &g), m), v) in values
                .iter_mut()
                .zip(grads)
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *w -= decay * *w;
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    /// `confusion[gold][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl Metrics {
    pub fn from_confusion(confusion: Vec<Vec<usize>>, labels: &[String]) -> Self {
        let n = confusion.len();
        let total: usize = confusion.iter().flatten().sum();
        let correct: usize = (0..n).map(|i| confusion[i][i]).sum();
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let per_class = (0..n)
            .map(|c| {
                let tp = confusion[c][c];
                let predicted: usize = (0..n).map(|g| confusion[g][c]).sum();
                let support: usize = confusion[c].iter().sum();
                let precision = ratio(tp, predicted);
                let recall = ratio(tp, support);
                let f1 = if precision + recall == 0.0 {
                    0.0
                } else {
                    2.0 * precision * recall / (precision + recall)
                };
                ClassMetrics {
                    label: labels.get(c).cloned().unwrap_or_else(|| c.to_string()),
                    precision,
                    recall,
                    f1,
                    support,
                }
            })
            .collect();
        Self {
            accuracy: ratio(correct, total),
            per_class,
            confusion,
        }
    }

    /// Plain-text table with one row per class.
    pub fn table(&self) -> String {
        let mut out = format!("accuracy {:.4}\n", self.accuracy);
        out.push_str(&format!(
            "{:<16} {:>9} {:>9} {:>9} {:>8}\n",
            "label", "precision", "recall", "f1", "support"
        ));
        for c in &self.per_class {
            out.push_str(&format!(
                "{:<16} {:>9.4} {:>9.4} {:>9.4} {:>8}\n",
                c.label, c.precision, c.recall, c.f1, c.support
            ));
        }
        out
    }
}

/// Metrics of argmax predictions over `samples`.
pub fn evaluate(model: &Model, samples: &[MultimodalSample]) -> Result<Metrics> {
    let n = model.labels.len();
    let mut confusion = vec![vec![0; n]; n];
    for s in samples {
        let gold = model.labels.index_of(&s.label)?;
        let pred = model.predict(s)?.label;
        confusion[gold][pred] += 1;
    }
    Ok(Metrics::from_confusion(confusion, model.labels.names()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
}

/// Seeded hold-out of `ceil(fraction * n)` samples, at least one on each
/// side. Returns `(train, validation)`.
pub fn split(
    samples: &[MultimodalSample],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<MultimodalSample>, Vec<MultimodalSample>)> {
    if samples.len() < 2 {
        return Err(Error::Config(format!(
            "need at least 2 samples to hold out validation data, got {}",
            samples.len()
        )));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((fraction * samples.len() as f64).ceil() as usize).clamp(1, samples.len() - 1);
    let mut val_idx = order[..n_val].to_vec();
    let mut train_idx = order[n_val..].to_vec();
    val_idx.sort_unstable();
    train_idx.sort_unstable();
    let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect();
    Ok((pick(&train_idx), pick(&val_idx)))
}

/// Mini-batch training; restores the parameters of the best validation
/// epoch before returning.
pub fn train(
    model: &mut Model,
    train_set: &[MultimodalSample],
    val_set: &[MultimodalSample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Config("training and validation splits must be non-empty".into()));
    }
    let golds: Vec<usize> = train_set
        .iter()
        .map(|s| model.labels.index_of(&s.label))
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&model.params, cfg.lr, cfg.weight_decay);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(usize, f64, Vec<Tensor>)> = None;
    let mut bad_epochs = 0;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut counted = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            model.params.zero_grad();
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let mut fwd = match model.forward(&train_set[i], None) {
                    Ok(f) => f,
                    Err(Error::NoCandidates(kind)) => {
                        log::warn!("sample {} skipped: no {kind} candidates", train_set[i].id);
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                let loss = fwd.loss(golds[i])?;
                loss_sum += fwd.graph.value(loss).item();
                counted += 1;
                let scaled = fwd.graph.scale(loss, scale);
                fwd.graph.backward(scaled)?;
                fwd.graph.accumulate_param_grads(&mut model.params);
            }
            match adam.step(&mut model.params) {
                Ok(()) => {}
                Err(Error::NonFiniteGradient(name)) => {
                    log::warn!("epoch {epoch}: batch skipped after non-finite gradient in {name}");
                }
                Err(e) => return Err(e),
            }
        }
        let val_accuracy = evaluate(model, val_set)?.accuracy;
        let record = EpochRecord {
            epoch,
            train_loss: if counted == 0 { 0.0 } else { loss_sum / counted as f64 },
            val_accuracy,
        };
        log::info!(
            "epoch {epoch}: train loss {:.5}, val accuracy {:.4}",
            record.train_loss,
            val_accuracy
        );
        on_epoch(&record);
        history.push(record);

        if best.as_ref().is_none_or(|(_, acc, _)| val_accuracy > *acc) {
            best = Some((epoch, val_accuracy, model.params.snapshot()));
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if bad_epochs > cfg.patience {
                log::info!("early stop after epoch {epoch}");
                break;
            }
        }
    }
    let (best_epoch, best_val_accuracy, snapshot) = best.expect("at least one epoch");
    model.params.restore(&snapshot);
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_val_accuracy,
    })
}
