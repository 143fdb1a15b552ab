//! Fusion of observational and randomized treatment-effect estimates with an
//! optimal shrinkage factor, Bayesian adaptive selection of which
//! interventions to randomize next, and a synthetic simulation lab.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod basis;
pub mod data;
pub mod design;
pub mod error;
pub mod estimators;
pub mod fusion;
pub mod linalg;
pub mod output;
pub mod rng;
pub mod simlab;

pub use data::{
    weighted_loss, EstimateState, FeatureMap, InterventionCatalog, LossWeights, ObservationalRound, RctRecord,
    RctRound, UnitRecord,
};
pub use error::{Error, Result};
