//! Propensity and outcome working models over spline features of the context.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::glm::{expit, fit_least_squares, fit_logistic, NewtonOptions};
use crate::basis::{SplineBasis, SplineSpec};
use crate::data::ObservationalRound;
use crate::error::{Error, Result};

/// Observational records from several rounds stacked into dense arrays.
#[derive(Debug, Clone)]
pub struct PooledObservations {
    /// `N × p_x` contexts.
    pub x: DMatrix<f64>,
    /// `N × J` intervention statuses as 0.0 / 1.0.
    pub a: DMatrix<f64>,
    pub y: DVector<f64>,
}

impl PooledObservations {
    pub fn from_rounds(rounds: &[ObservationalRound]) -> Result<Self> {
        let first = rounds
            .first()
            .ok_or_else(|| Error::Validation("no observational rounds".into()))?;
        let (px, j) = (first.context_dim(), first.n_interventions());
        let n: usize = rounds.iter().map(|r| r.records().len()).sum();
        let mut x = DMatrix::zeros(n, px);
        let mut a = DMatrix::zeros(n, j);
        let mut y = DVector::zeros(n);
        let mut i = 0;
        for r in rounds {
            if r.context_dim() != px || r.n_interventions() != j {
                return Err(Error::Validation(format!(
                    "round {} has shape (p_x={}, J={}), expected (p_x={px}, J={j})",
                    r.round(),
                    r.context_dim(),
                    r.n_interventions()
                )));
            }
            for rec in r.records() {
                for (d, &v) in rec.x().iter().enumerate() {
                    x[(i, d)] = v;
                }
                for (k, &v) in rec.a().iter().enumerate() {
                    a[(i, k)] = f64::from(v);
                }
                y[i] = rec.y();
                i += 1;
            }
        }
        Ok(Self { x, a, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn n_interventions(&self) -> usize {
        self.a.ncols()
    }

    fn status(&self, j: usize) -> Vec<f64> {
        self.a.column(j).iter().copied().collect()
    }
}

/// Marginal logistic models `P(A^j = 1 | X)`, one per intervention.
#[derive(Debug, Clone)]
pub struct PropensityModel {
    basis: SplineBasis,
    coefs: Vec<DVector<f64>>,
    std_errors: Vec<DVector<f64>>,
    clip: f64,
}

impl PropensityModel {
    pub fn basis(&self) -> &SplineBasis {
        &self.basis
    }

    pub fn coefficients(&self, j: usize) -> &DVector<f64> {
        &self.coefs[j]
    }

    pub fn std_errors(&self, j: usize) -> &DVector<f64> {
        &self.std_errors[j]
    }

    pub fn clip(&self) -> f64 {
        self.clip
    }

    /// Clipped probabilities for the rows of a feature matrix built by [`Self::basis`].
    pub fn probabilities(&self, j: usize, features: &DMatrix<f64>) -> Vec<f64> {
        let eps = self.clip;
        (features * &self.coefs[j])
            .iter()
            .map(|&t| expit(t).clamp(eps, 1.0 - eps))
            .collect()
    }

    /// A model with a constant probability for every intervention.
    pub fn constant(basis: SplineBasis, n_interventions: usize, p: f64, clip: f64) -> Self {
        let mut coef = DVector::zeros(basis.n_columns());
        coef[0] = (p / (1.0 - p)).ln();
        let se = DVector::zeros(basis.n_columns());
        Self {
            basis,
            coefs: vec![coef; n_interventions],
            std_errors: vec![se; n_interventions],
            clip,
        }
    }
}

fn check_clip(clip: f64) -> Result<()> {
    if !(clip > 0.0 && clip < 0.5) {
        return Err(Error::Domain(format!("propensity clip {clip} outside (0, 0.5)")));
    }
    Ok(())
}

/// Fits every marginal propensity model on spline features of the pooled contexts.
pub fn fit_propensity(
    obs: &PooledObservations,
    spec: &SplineSpec,
    clip: f64,
    opts: NewtonOptions,
) -> Result<PropensityModel> {
    check_clip(clip)?;
    let basis = SplineBasis::fit(&obs.x, spec)?;
    let phi = basis.design(&obs.x)?;
    let p = basis.n_columns();
    if obs.len() < p + 1 {
        return Err(Error::Fit {
            j: None,
            msg: format!("{} records for a {p}-column propensity basis", obs.len()),
        });
    }
    let fits: Vec<_> = (0..obs.n_interventions())
        .into_par_iter()
        .map(|j| {
            fit_logistic(&phi, &obs.status(j), opts).map_err(|e| match e {
                Error::Fit { msg, .. } => Error::Fit { j: Some(j + 1), msg },
                other => Error::Fit {
                    j: Some(j + 1),
                    msg: other.to_string(),
                },
            })
        })
        .collect::<Result<_>>()?;
    let (coefs, std_errors) = fits
        .into_iter()
        .map(|f| {
            let se = f.std_errors();
            (f.coef, se)
        })
        .unzip();
    Ok(PropensityModel {
        basis,
        coefs,
        std_errors,
        clip,
    })
}

/// Arm-wise regression functions `m_1^j` and `m_0^j` for one intervention.
#[derive(Debug, Clone)]
pub struct OutcomeArms {
    pub treated: DVector<f64>,
    pub control: DVector<f64>,
    pub treated_se: DVector<f64>,
    pub control_se: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct OutcomeModel {
    basis: SplineBasis,
    arms: Vec<OutcomeArms>,
}

impl OutcomeModel {
    pub fn new(basis: SplineBasis, arms: Vec<OutcomeArms>) -> Self {
        Self { basis, arms }
    }

    pub fn basis(&self) -> &SplineBasis {
        &self.basis
    }

    pub fn arms(&self, j: usize) -> &OutcomeArms {
        &self.arms[j]
    }

    /// `(m_1, m_0)` predictions for the rows of a feature matrix built by [`Self::basis`].
    pub fn predict(&self, j: usize, features: &DMatrix<f64>) -> (DVector<f64>, DVector<f64>) {
        let arms = &self.arms[j];
        (features * &arms.treated, features * &arms.control)
    }
}

fn arm_rows(phi: &DMatrix<f64>, y: &DVector<f64>, status: &[f64], arm: f64) -> (DMatrix<f64>, Vec<f64>) {
    let idx: Vec<usize> = (0..status.len()).filter(|&i| status[i] == arm).collect();
    (phi.select_rows(&idx), idx.iter().map(|&i| y[i]).collect())
}

fn fit_arms(phi: &DMatrix<f64>, obs: &PooledObservations, j: usize) -> Result<OutcomeArms> {
    let status = obs.status(j);
    let p = phi.ncols();
    let mut out = Vec::with_capacity(2);
    for (arm, name) in [(1.0, "treated"), (0.0, "control")] {
        let (x, y) = arm_rows(phi, &obs.y, &status, arm);
        if y.len() < p + 1 {
            return Err(Error::InsufficientData {
                j: j + 1,
                msg: format!("{name} arm has {} records for a {p}-column outcome basis", y.len()),
            });
        }
        let fit = fit_least_squares(&x, &y).map_err(|e| match e {
            Error::RankDeficient { columns } => Error::Fit {
                j: Some(j + 1),
                msg: format!("{name} arm design is rank-deficient; collinear columns {columns:?}"),
            },
            other => other,
        })?;
        out.push(fit);
    }
    let control = out.pop().expect("two arms");
    let treated = out.pop().expect("two arms");
    Ok(OutcomeArms {
        treated: treated.coef,
        control: control.coef,
        treated_se: treated.std_errors,
        control_se: control.std_errors,
    })
}

/// Least-squares outcome regressions for intervention `j` only.
pub fn fit_outcome(obs: &PooledObservations, j: usize, spec: &SplineSpec) -> Result<(SplineBasis, OutcomeArms)> {
    if j >= obs.n_interventions() {
        return Err(Error::Domain(format!(
            "intervention {} outside 1..={}",
            j + 1,
            obs.n_interventions()
        )));
    }
    let basis = SplineBasis::fit(&obs.x, spec)?;
    let phi = basis.design(&obs.x)?;
    let arms = fit_arms(&phi, obs, j)?;
    Ok((basis, arms))
}

/// Outcome regressions for every intervention, sharing one basis.
pub fn fit_outcomes(obs: &PooledObservations, spec: &SplineSpec) -> Result<OutcomeModel> {
    let basis = SplineBasis::fit(&obs.x, spec)?;
    let phi = basis.design(&obs.x)?;
    let arms = (0..obs.n_interventions())
        .into_par_iter()
        .map(|j| fit_arms(&phi, obs, j))
        .collect::<Result<_>>()?;
    Ok(OutcomeModel { basis, arms })
}
