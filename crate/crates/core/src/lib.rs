//! Graph-convolutional claim verification over claim-evidence graphs and
//! per-instance rationale extraction by learned edge and node perturbation
//! masks.
//!
//! The pipeline is: [`data`] instances are embedded by [`featurize`] into
//! fully connected [`graph`]s, a [`model`] is trained on verdicts, and
//! [`explain`] optimizes mask logits per instance against the frozen model.
//! [`metrics`] scores the resulting rationale sets and masks.

pub mod data;
pub mod error;
pub mod explain;
pub mod featurize;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod tensor;

pub use data::{Instance, SynthConfig, Verdict};
pub use error::{Error, Result};
pub use explain::{explain_instance, ExplainConfig, Explanation, Lambdas};
pub use graph::{build_graph, EvidenceGraph, GraphOptions};
pub use model::{train_base, MaskMode, MaskSpec, ModelCheckpoint, TrainConfig};
pub use tensor::{Matrix, Tape, Var};
