//! Per-intervention effect estimates from pooled rounds.
//!
//! Observational rounds feed a doubly robust (AIPW) estimator built on
//! logistic propensity and least-squares outcome models over spline features.
//! Randomized rounds feed a difference in means restricted to records whose
//! randomized coordinate is the intervention of interest.

mod dr;
pub mod glm;
mod nuisance;
mod rct;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

pub use dr::{dr_all, dr_contributions, dr_estimate, gamma_hat, DrEstimates};
pub use glm::NewtonOptions;
pub use nuisance::{
    fit_outcome, fit_outcomes, fit_propensity, OutcomeArms, OutcomeModel, PooledObservations, PropensityModel,
};
pub use rct::{rct_counts, rct_estimate, upsilon_hat, RctEstimate};

use crate::basis::SplineSpec;
use crate::data::{EstimateState, ObservationalRound, RctRound};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorSettings {
    pub propensity_basis: SplineSpec,
    pub outcome_basis: SplineSpec,
    /// Fitted propensities are clipped into `[clip, 1 - clip]`.
    pub clip: f64,
}

impl Default for EstimatorSettings {
    fn default() -> Self {
        Self {
            propensity_basis: SplineSpec::default(),
            outcome_basis: SplineSpec::default(),
            clip: 0.01,
        }
    }
}

/// DR estimates and their covariance for the pooled observational rounds.
pub fn observational_estimates(obs: &[ObservationalRound], settings: &EstimatorSettings) -> Result<DrEstimates> {
    let pooled = PooledObservations::from_rounds(obs)?;
    let prop = fit_propensity(&pooled, &settings.propensity_basis, settings.clip, NewtonOptions::default())?;
    let out = fit_outcomes(&pooled, &settings.outcome_basis)?;
    dr_all(&pooled, &prop, &out)
}

/// Combines observational estimates with the randomized rounds run so far.
pub fn combine(obs: &DrEstimates, rct: &[RctRound]) -> Result<EstimateState> {
    let j = obs.tau.len();
    for r in rct {
        if r.n_interventions() != j {
            return Err(Error::Dimension {
                what: "interventions in randomized round",
                expected: j,
                found: r.n_interventions(),
            });
        }
    }
    let counts = rct_counts(rct, j);
    let mut tau_rct = vec![None; j];
    let mut ups = vec![None; j];
    for k in (0..j).filter(|&k| counts[k] > 0) {
        let e = rct_estimate(rct, k)?;
        if e.degenerate {
            return Err(Error::InsufficientData {
                j: k + 1,
                msg: "randomized outcomes have zero variance".into(),
            });
        }
        tau_rct[k] = Some(e.tau);
        ups[k] = Some(e.var);
    }
    let history: Vec<BTreeSet<usize>> = rct.iter().map(|r| r.selected().clone()).collect();
    EstimateState::new(obs.tau.clone(), tau_rct, obs.gamma.clone(), ups, counts, history)
}

/// Full estimation pass over all rounds observed so far.
pub fn estimate_state(
    obs: &[ObservationalRound],
    rct: &[RctRound],
    settings: &EstimatorSettings,
) -> Result<EstimateState> {
    combine(&observational_estimates(obs, settings)?, rct)
}
