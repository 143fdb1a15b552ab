use serde::{Deserialize, Serialize};

use crate::basis::SplineSpec;
use crate::data::FeatureMap;
use crate::design::Hyperparams;
use crate::error::{Error, Result};
use crate::estimators::EstimatorSettings;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Number of interventions `J`.
    pub interventions: usize,
    /// Rounds `M`.
    pub rounds: usize,
    /// Observational records per round.
    pub obs_size: usize,
    /// Randomized records per round.
    pub rct_size: usize,
    /// Size of the randomly chosen first randomized set.
    pub initial_rct: usize,
    /// Interventions randomized in each later round.
    pub batch: usize,
    pub replications: usize,
    pub seed: u64,
    /// Forbid re-randomizing an intervention.
    #[serde(default)]
    pub without_replacement: bool,
    /// Center the variance prior on the first round's estimates.
    #[serde(default)]
    pub calibrate_prior: bool,
    /// Grid size for exported risk curves.
    #[serde(default = "default_curve_points")]
    pub curve_points: usize,
}

fn default_curve_points() -> usize {
    101
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub context_dim: usize,
    pub attribute_dim: usize,
    /// Effect of interventions in the first half of the index range.
    pub effect_first_half: f64,
    pub effect_second_half: f64,
    pub treated_noise_first_half: f64,
    pub treated_noise_second_half: f64,
    pub control_noise: f64,
    /// Value of a nonzero off-diagonal covariate covariance.
    pub cov_offdiag: f64,
    /// Probability that an off-diagonal covariance is nonzero.
    pub cov_offdiag_prob: f64,
    pub kernel_variance: f64,
    pub kernel_lengthscale: f64,
    /// Every entry of the propensity coefficient vector.
    pub propensity_coef: f64,
    /// Weight of the confounder in the propensity logit.
    pub confounder_loading: f64,
    /// Every entry of the outcome coefficient vector on `h(x)`.
    pub outcome_coef: f64,
    /// Every entry of the confounder coefficient vector in the outcome.
    pub confounder_coef: f64,
    /// 1-based context pairs whose products enter `h(x)` after the main effects.
    pub outcome_pairs: Vec<(usize, usize)>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            context_dim: 5,
            attribute_dim: 3,
            effect_first_half: 1.0,
            effect_second_half: -1.0,
            treated_noise_first_half: 0.1,
            treated_noise_second_half: 1.0,
            control_noise: 0.1,
            cov_offdiag: 0.15,
            cov_offdiag_prob: 0.7,
            kernel_variance: 1.0,
            kernel_lengthscale: 5.0,
            propensity_coef: 0.5,
            confounder_loading: 2.0,
            outcome_coef: 1.0,
            confounder_coef: 0.5,
            outcome_pairs: default_pairs(),
        }
    }
}

fn default_pairs() -> Vec<(usize, usize)> {
    vec![(1, 2), (1, 3), (1, 4), (2, 3), (2, 4), (3, 4)]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub experiment: ExperimentConfig,
    #[serde(default)]
    pub generator: GeneratorConfig,
    /// Feature map `psi` of the bias model.
    pub bias_features: FeatureMap,
    #[serde(default)]
    pub estimator: EstimatorSettings,
    #[serde(default)]
    pub design: Hyperparams,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let e = &self.experiment;
        let g = &self.generator;
        let bad = |key: &str, msg: String| Err(Error::Validation(format!("{key}: {msg}")));
        for (key, v) in [
            ("experiment.interventions", e.interventions),
            ("experiment.rounds", e.rounds),
            ("experiment.obs_size", e.obs_size),
            ("experiment.rct_size", e.rct_size),
            ("experiment.initial_rct", e.initial_rct),
            ("experiment.batch", e.batch),
            ("experiment.replications", e.replications),
            ("generator.context_dim", g.context_dim),
            ("generator.attribute_dim", g.attribute_dim),
        ] {
            if v == 0 {
                return bad(key, "must be positive".into());
            }
        }
        if e.batch > e.interventions {
            return bad("experiment.batch", format!("{} exceeds interventions = {}", e.batch, e.interventions));
        }
        if e.initial_rct > e.interventions {
            return bad(
                "experiment.initial_rct",
                format!("{} exceeds interventions = {}", e.initial_rct, e.interventions),
            );
        }
        if e.curve_points < 2 {
            return bad("experiment.curve_points", "need at least 2 points".into());
        }
        if e.without_replacement && e.initial_rct + e.batch * (e.rounds - 1) > e.interventions {
            return bad(
                "experiment.without_replacement",
                format!(
                    "{} rounds need {} distinct interventions, only {} exist",
                    e.rounds,
                    e.initial_rct + e.batch * (e.rounds - 1),
                    e.interventions
                ),
            );
        }
        for (key, v) in [
            ("generator.treated_noise_first_half", g.treated_noise_first_half),
            ("generator.treated_noise_second_half", g.treated_noise_second_half),
            ("generator.control_noise", g.control_noise),
            ("generator.kernel_variance", g.kernel_variance),
        ] {
            if !(v >= 0.0) {
                return bad(key, format!("{v} must be nonnegative"));
            }
        }
        if !(g.kernel_lengthscale > 0.0) {
            return bad("generator.kernel_lengthscale", format!("{} must be positive", g.kernel_lengthscale));
        }
        if !(0.0..=1.0).contains(&g.cov_offdiag_prob) {
            return bad("generator.cov_offdiag_prob", format!("{} outside [0, 1]", g.cov_offdiag_prob));
        }
        for &(a, b) in &g.outcome_pairs {
            if a == 0 || b == 0 || a > g.context_dim || b > g.context_dim {
                return bad(
                    "generator.outcome_pairs",
                    format!("pair ({a}, {b}) outside 1..={}", g.context_dim),
                );
            }
        }
        if !(self.estimator.clip > 0.0 && self.estimator.clip < 0.5) {
            return bad("estimator.clip", format!("{} outside (0, 0.5)", self.estimator.clip));
        }
        self.design
            .validate()
            .or_else(|err| bad("design", err.to_string()))?;
        Ok(())
    }

    /// Randomized records per intervention in a round with `batch` selected interventions.
    pub fn per_arm_records(&self, batch: usize) -> usize {
        self.experiment.rct_size / batch.max(1)
    }
}

/// Estimator bases using the outcome pairs of the generator.
fn estimator(degree: usize, knots: usize, pairs: &[(usize, usize)]) -> EstimatorSettings {
    EstimatorSettings {
        propensity_basis: SplineSpec::new(degree, knots),
        outcome_basis: SplineSpec::new(degree, knots).with_interactions(pairs.to_vec()),
        clip: 0.01,
    }
}

/// Tiny configuration for quick end-to-end runs.
pub fn smoke() -> SimConfig {
    let generator = GeneratorConfig {
        attribute_dim: 1,
        ..GeneratorConfig::default()
    };
    SimConfig {
        experiment: ExperimentConfig {
            interventions: 5,
            rounds: 2,
            obs_size: 500,
            rct_size: 200,
            initial_rct: 3,
            batch: 1,
            replications: 2,
            seed: 1,
            without_replacement: false,
            calibrate_prior: false,
            curve_points: 101,
        },
        estimator: estimator(1, 0, &generator.outcome_pairs),
        generator,
        bias_features: FeatureMap::Linear,
        design: Hyperparams::default(),
    }
}

/// Reduced version of the full study that runs on a workstation.
pub fn desk() -> SimConfig {
    let generator = GeneratorConfig::default();
    SimConfig {
        experiment: ExperimentConfig {
            interventions: 30,
            rounds: 10,
            obs_size: 1000,
            rct_size: 400,
            initial_rct: 6,
            batch: 3,
            replications: 100,
            seed: 1,
            without_replacement: false,
            calibrate_prior: false,
            curve_points: 101,
        },
        estimator: estimator(3, 1, &generator.outcome_pairs),
        generator,
        bias_features: FeatureMap::Linear,
        design: Hyperparams::default(),
    }
}

/// The full-size study: 100 interventions, 20 rounds, cubic bias features.
pub fn paper_full() -> SimConfig {
    let generator = GeneratorConfig::default();
    SimConfig {
        experiment: ExperimentConfig {
            interventions: 100,
            rounds: 20,
            obs_size: 5000,
            rct_size: 2000,
            initial_rct: 15,
            batch: 5,
            replications: 100,
            seed: 1,
            without_replacement: false,
            calibrate_prior: false,
            curve_points: 101,
        },
        estimator: estimator(3, 3, &generator.outcome_pairs),
        generator,
        bias_features: FeatureMap::Spline(SplineSpec::new(3, 0)),
        design: Hyperparams::default(),
    }
}

pub fn preset(name: &str) -> Option<SimConfig> {
    match name {
        "smoke" => Some(smoke()),
        "desk" => Some(desk()),
        "paper_full" => Some(paper_full()),
        _ => None,
    }
}

pub const PRESETS: [&str; 3] = ["smoke", "desk", "paper_full"];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for name in PRESETS {
            preset(name).unwrap().validate().unwrap();
        }
        assert!(preset("huge").is_none());
    }

    #[test]
    fn validation_names_key() {
        let mut c = smoke();
        c.experiment.batch = 9;
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("experiment.batch"), "{msg}");
    }

    #[test]
    fn default_h_has_eleven_columns() {
        let g = GeneratorConfig::default();
        assert_eq!(g.context_dim + g.outcome_pairs.len(), 11);
    }
}
