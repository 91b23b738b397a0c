//! Circuit discovery on a small vision transformer and circuit-based
//! generalization metrics.
//!
//! The crate is organised bottom-up:
//!
//! * [`nn`]: a pre-norm ViT with hand-written reverse-mode gradients.
//! * [`graph`]: the head/MLP-level computational graph and mean ablation.
//! * [`discovery`]: per-edge circuit weights (exact, EAP, EAP-IG) and
//!   faithfulness scores.
//! * [`depth`]: inter-layer dependency matrices and dependency depth bias.
//! * [`motif`]: ridge-regularised CCA directions over a model zoo.
//! * [`shift`]: circuit shift scores with vector and graph distances.
//! * [`monitor`]: threshold calibration, alarms and confidence baselines.
//! * [`synth`]: synthetic shortcut tasks, corruptions, zoos and pipelines.

pub mod data;
pub mod depth;
pub mod discovery;
pub mod error;
pub mod graph;
pub mod monitor;
pub mod motif;
pub mod nn;
pub mod par;
pub mod shift;
pub mod stats;
pub mod synth;
pub mod tensor;

pub use error::{Error, ErrorClass, Result};
