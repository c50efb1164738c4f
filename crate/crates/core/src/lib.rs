//! Test-time feedback propagation for multi-label networks.
//!
//! Given a trained network and the true values of some of its outputs, the
//! feedback procedures back-propagate a loss on those known outputs into
//! interior activations (or residuals injected at them) and re-forward, which
//! refines the predictions for the remaining outputs without touching the
//! model parameters.

pub mod error;
pub mod feedback;
pub mod graph;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod tensor;

pub use error::{Error, Result};
pub use feedback::{FeedbackConfig, FeedbackOutcome, FeedbackTrace, ResidualPlacement, ResidualSet, UpdateRule};
pub use graph::{forward_full, grad_check, NodeId, Tape};
pub use metrics::{ClassWeights, EvidencePartition};
pub use model::{build_model, load_model, pivot_set, save_model, Architecture, Head, LayerKind, LayerSpec, Model, PivotSet};
pub use tensor::Tensor;
