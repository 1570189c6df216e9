//! Responder identification in longitudinal two-arm trials: landmark
//! (partly conditional) survival modelling, counterfactual treatment-effect
//! scoring, local surrogate explanations, and a trial simulator for
//! validating the whole chain against known ground truth.

pub mod dataset;
pub mod effects;
pub mod error;
pub mod evaluation;
pub mod explain;
pub mod metrics;
pub mod pipeline;
pub mod seed;
pub mod survmodels;
pub mod trialsim;

pub use error::{Error, Result};
