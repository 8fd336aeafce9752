//! Hourly ICU risk scoring for cardiogenic shock.
//!
//! The crate wires a small deterministic autodiff engine into a full
//! pipeline: a dilated causal convolutional risk model trained with a
//! softmax-weighted max-risk loss, a synthetic cohort generator whose
//! labels are recovered by a rule-based shock adjudicator, cross-validated
//! training with optional mortality pretraining, alarm-oriented evaluation
//! metrics, and Shapley-value interpretation through a masked-prediction
//! surrogate.

pub mod cohort;
pub mod error;
pub mod eval;
pub mod interpret;
pub mod model;
pub mod pipeline;
pub mod schema;
pub mod tensor;
pub mod train;
pub mod util;

pub use error::{CshockError, Result};
