//! Differentiable clause induction over text-image pairs.
//!
//! Tokens and image patches are fused by a GCN, turned into cross-modal
//! constants, and scored by label-conditioned conjunctive clauses whose
//! truth values are combined with product t-norm connectives.

pub mod autodiff;
pub mod clauses;
pub mod config;
pub mod crossmodal;
pub mod data;
pub mod encoders;
pub mod error;
pub mod gradcheck;
pub mod logic;
pub mod model;
pub mod objects;
pub mod report;
pub mod train;

pub use error::{Error, Result};

pub use autodiff::{sparsemax, Graph, ParamRegistry, Tensor, Var};
pub use config::{ModelConfig, RunConfig, TrainConfig};
pub use data::{Dataset, DatasetMeta, MultimodalSample, SyntheticSpec};
pub use model::{Model, Selection};
pub use report::ExplanationReport;
pub use train::{EpochRecord, Metrics};
