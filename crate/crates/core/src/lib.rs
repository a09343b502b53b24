//! Conditional generative augmentation for sparse event-centered panels,
//! with caliper-matched two-way fixed-effects event-study estimation,
//! synthetic-data fidelity metrics and confounding-sensitivity bounds.
//!
//! Pipeline shape: ingest a long panel, reshape it wide around the event,
//! train a per-arm conditional adversarial generator anchored to exact
//! resampled baseline skeletons, reconstruct and clamp the synthetic
//! panel, then match, estimate and stress-test the effect.

pub mod dgp;
pub mod encoder;
pub mod error;
pub mod estimator;
pub mod fidelity;
pub mod generator;
pub mod matching;
pub mod panel;
pub mod pipeline;
pub mod robustness;
pub mod schema;
pub mod seed;
pub mod wide;

pub use error::{Error, Result};
pub use schema::{Schema, VarKind, VarRole, VariableSpec};
pub use wide::EventWindow;
