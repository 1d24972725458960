//! Structured explanations of a prediction and their text rendering.

use serde::{Deserialize, Serialize};

use crate::clauses::{Atom, Clause};
use crate::crossmodal::patch_coords;
use crate::data::MultimodalSample;
use crate::error::Result;
use crate::model::Model;
use crate::objects::{Constant, MetaPredicate};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Surface {
    Token { index: usize, text: String },
    Patch { index: usize, row: usize, col: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationWeight {
    pub index: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomReport {
    pub kind: MetaPredicate,
    pub constant: Constant,
    pub surfaces: Vec<Surface>,
    pub score: f64,
    pub truth: f64,
    /// Nonzero correlation weights, largest first.
    pub correlations: Vec<CorrelationWeight>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClauseReport {
    pub layer: usize,
    pub truth: f64,
    pub body: String,
    pub atoms: Vec<AtomReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelReport {
    pub label: String,
    pub probability: f64,
    pub head_truth: f64,
    pub formula: String,
    pub clauses: Vec<ClauseReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationReport {
    pub schema_version: u32,
    pub sample_id: String,
    pub predicted_label: String,
    pub predicted_probability: f64,
    pub labels: Vec<LabelReport>,
}

fn constant_surfaces(c: &Constant, sample: &MultimodalSample, z: usize) -> Vec<Surface> {
    let tokens = c.tokens().into_iter().map(|i| Surface::Token {
        index: i,
        text: sample.surface(i),
    });
    let patches = c.patches().into_iter().map(|q| {
        let (row, col) = patch_coords(q, z);
        Surface::Patch { index: q, row, col }
    });
    // tokens precede patches, which is also the order inside a (t, v) pair
    tokens.chain(patches).collect()
}

fn atom_report(atom: &Atom, sample: &MultimodalSample, z: usize) -> AtomReport {
    let mut correlations: Vec<CorrelationWeight> = atom
        .correlation_weights
        .iter()
        .enumerate()
        .filter(|(_, &w)| w > 0.0)
        .map(|(index, &weight)| CorrelationWeight { index, weight })
        .collect();
    correlations.sort_by(|a, b| b.weight.total_cmp(&a.weight).then(a.index.cmp(&b.index)));
    AtomReport {
        kind: atom.kind,
        constant: atom.constant,
        surfaces: constant_surfaces(&atom.constant, sample, z),
        score: atom.score,
        truth: atom.truth,
        correlations,
    }
}

/// `b_tv((t_3,v_12), Rumor) ∧ b_t(t_5, Rumor)`.
pub fn clause_body(clause: &Clause, label: &str) -> String {
    clause
        .atoms
        .iter()
        .map(|a| format!("{}({}, {label})", a.kind, a.constant))
        .collect::<Vec<_>>()
        .join(" ∧ ")
}

/// Disjunction of per-layer bodies implying the head atom.
pub fn clause_formula(bodies: &[String], label: &str) -> String {
    let lhs = if bodies.len() == 1 {
        bodies[0].clone()
    } else {
        bodies.iter().map(|b| format!("({b})")).collect::<Vec<_>>().join(" ∨ ")
    };
    format!("{lhs} ⇒ h((T,I), {label})")
}

pub fn explain(model: &Model, sample: &MultimodalSample) -> Result<ExplanationReport> {
    let fwd = model.forward(sample, None)?;
    let prediction = fwd.prediction();
    let clauses = fwd.clauses();
    let names = model.labels.names();
    let z = model.config.z;
    let labels = names
        .iter()
        .enumerate()
        .map(|(y, name)| {
            let per_layer: Vec<ClauseReport> = clauses
                .iter()
                .map(|layer| {
                    let c = &layer[y];
                    ClauseReport {
                        layer: c.layer,
                        truth: c.truth,
                        body: clause_body(c, name),
                        atoms: c.atoms.iter().map(|a| atom_report(a, sample, z)).collect(),
                    }
                })
                .collect();
            let bodies: Vec<String> = per_layer.iter().map(|c| c.body.clone()).collect();
            LabelReport {
                label: name.clone(),
                probability: prediction.probabilities[y],
                head_truth: prediction.truths[y],
                formula: clause_formula(&bodies, name),
                clauses: per_layer,
            }
        })
        .collect();
    Ok(ExplanationReport {
        schema_version: REPORT_SCHEMA_VERSION,
        sample_id: sample.id.clone(),
        predicted_label: names[prediction.label].clone(),
        predicted_probability: prediction.probabilities[prediction.label],
        labels,
    })
}

fn surface_text(s: &Surface) -> String {
    match s {
        Surface::Token { index, text } => format!("t_{index}={text:?}"),
        Surface::Patch { index, row, col } => format!("v_{index}=({row}, {col})"),
    }
}

/// Human-readable rendering of a report.
pub fn render_text(report: &ExplanationReport) -> String {
    let mut out = format!(
        "sample {}: predicted {} (p={:.4})\n",
        report.sample_id, report.predicted_label, report.predicted_probability
    );
    for l in &report.labels {
        out.push_str(&format!(
            "  {}: p={:.4} head truth={:.6}\n    {}\n",
            l.label, l.probability, l.head_truth, l.formula
        ));
        for c in &l.clauses {
            out.push_str(&format!("    layer {} (truth {:.6})\n", c.layer, c.truth));
            for a in &c.atoms {
                let surfaces: Vec<String> = a.surfaces.iter().map(surface_text).collect();
                let weights: Vec<String> = a
                    .correlations
                    .iter()
                    .map(|w| format!("c{}:{:.3}", w.index, w.weight))
                    .collect();
                out.push_str(&format!(
                    "      {}({}) s={:.4} μ={:.4} [{}] correlations {}\n",
                    a.kind,
                    a.constant,
                    a.score,
                    a.truth,
                    surfaces.join(", "),
                    weights.join(" ")
                ));
            }
        }
    }
    out
}
