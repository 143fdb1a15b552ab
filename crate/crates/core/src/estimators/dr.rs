use nalgebra::{DMatrix, DVector};

use super::nuisance::{OutcomeModel, PooledObservations, PropensityModel};
use crate::error::Result;

/// Per-record AIPW scores for intervention `j`; their mean is the DR estimate.
pub fn dr_contributions(
    obs: &PooledObservations,
    prop: &PropensityModel,
    out: &OutcomeModel,
    j: usize,
) -> Result<Vec<f64>> {
    let phi_p = prop.basis().design(&obs.x)?;
    let phi_o = out.basis().design(&obs.x)?;
    Ok(scores(obs, prop, out, &phi_p, &phi_o, j))
}

fn scores(
    obs: &PooledObservations,
    prop: &PropensityModel,
    out: &OutcomeModel,
    phi_p: &DMatrix<f64>,
    phi_o: &DMatrix<f64>,
    j: usize,
) -> Vec<f64> {
    let e = prop.probabilities(j, phi_p);
    let (m1, m0) = out.predict(j, phi_o);
    (0..obs.len())
        .map(|i| {
            let a = obs.a[(i, j)];
            let y = obs.y[i];
            m1[i] - m0[i] + a * (y - m1[i]) / e[i] - (1.0 - a) * (y - m0[i]) / (1.0 - e[i])
        })
        .collect()
}

/// Doubly robust estimate of the effect of intervention `j`, averaged over all pooled records.
pub fn dr_estimate(obs: &PooledObservations, prop: &PropensityModel, out: &OutcomeModel, j: usize) -> Result<f64> {
    let s = dr_contributions(obs, prop, out, j)?;
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}

/// DR estimates for every intervention with their finite-sample covariance.
#[derive(Debug, Clone)]
pub struct DrEstimates {
    pub tau: Vec<f64>,
    /// Covariance of centered AIPW scores divided by `N`, then by `N` again.
    pub gamma: DMatrix<f64>,
}

pub fn dr_all(obs: &PooledObservations, prop: &PropensityModel, out: &OutcomeModel) -> Result<DrEstimates> {
    let phi_p = prop.basis().design(&obs.x)?;
    let phi_o = out.basis().design(&obs.x)?;
    let (n, jn) = (obs.len(), obs.n_interventions());
    let mut centered = DMatrix::zeros(n, jn);
    let mut tau = Vec::with_capacity(jn);
    for j in 0..jn {
        let s = DVector::from_vec(scores(obs, prop, out, &phi_p, &phi_o, j));
        let mean = s.mean();
        tau.push(mean);
        centered.set_column(j, &s.add_scalar(-mean));
    }
    let gamma = crate::linalg::symmetrize(&(centered.tr_mul(&centered) / (n as f64 * n as f64)));
    Ok(DrEstimates { tau, gamma })
}

/// Finite-sample covariance of the DR estimates.
pub fn gamma_hat(obs: &PooledObservations, prop: &PropensityModel, out: &OutcomeModel) -> Result<DMatrix<f64>> {
    Ok(dr_all(obs, prop, out)?.gamma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{SplineBasis, SplineSpec};
    use crate::data::{ObservationalRound, UnitRecord};
    use crate::estimators::glm::NewtonOptions;
    use crate::estimators::nuisance::{fit_outcomes, fit_propensity, OutcomeArms};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn data(n: usize, j: usize, seed: u64) -> PooledObservations {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let records = (0..n)
            .map(|_| {
                let x: Vec<f64> = (0..2).map(|_| rng.sample(StandardNormal)).collect();
                let a: Vec<u8> = (0..j).map(|_| u8::from(rng.random::<f64>() < 0.5)).collect();
                let y = x[0] + a.iter().map(|&v| f64::from(v)).sum::<f64>() + rng.sample::<f64, _>(StandardNormal);
                UnitRecord::new(x, a, y).unwrap()
            })
            .collect();
        PooledObservations::from_rounds(&[ObservationalRound::new(1, records).unwrap()]).unwrap()
    }

    fn zero_outcome(basis: SplineBasis, j: usize) -> OutcomeModel {
        let z = DVector::zeros(basis.n_columns());
        let arms = OutcomeArms {
            treated: z.clone(),
            control: z.clone(),
            treated_se: z.clone(),
            control_se: z,
        };
        OutcomeModel::new(basis, vec![arms; j])
    }

    #[test]
    fn half_propensity_zero_outcome_is_ipw() {
        let obs = data(400, 1, 1);
        let basis = SplineBasis::fit(&obs.x, &SplineSpec::new(1, 0)).unwrap();
        let prop = PropensityModel::constant(basis.clone(), 1, 0.5, 0.01);
        let out = zero_outcome(basis, 1);
        let est = dr_estimate(&obs, &prop, &out, 0).unwrap();
        let ipw: f64 = (0..obs.len())
            .map(|i| 2.0 * obs.a[(i, 0)] * obs.y[i] - 2.0 * (1.0 - obs.a[(i, 0)]) * obs.y[i])
            .sum::<f64>()
            / obs.len() as f64;
        assert_relative_eq!(est, ipw, epsilon = 1e-12);
    }

    #[test]
    fn interpolating_outcomes_make_propensity_irrelevant() {
        // Outcome depends on x linearly within each arm and has no noise.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let records = (0..300)
            .map(|_| {
                let x: Vec<f64> = (0..2).map(|_| rng.sample(StandardNormal)).collect();
                let a = u8::from(rng.random::<f64>() < 0.4);
                let y = if a == 1 { 1.0 + 2.0 * x[1] } else { -0.5 * x[0] };
                UnitRecord::new(x, vec![a], y).unwrap()
            })
            .collect();
        let obs = PooledObservations::from_rounds(&[ObservationalRound::new(1, records).unwrap()]).unwrap();
        let out = fit_outcomes(&obs, &SplineSpec::new(1, 0)).unwrap();
        let fitted = fit_propensity(&obs, &SplineSpec::new(1, 0), 0.01, NewtonOptions::default()).unwrap();
        let flat = PropensityModel::constant(fitted.basis().clone(), 1, 0.3, 0.01);
        let a = dr_estimate(&obs, &fitted, &out, 0).unwrap();
        let b = dr_estimate(&obs, &flat, &out, 0).unwrap();
        assert_relative_eq!(a, b, epsilon = 1e-9);
        let phi = out.basis().design(&obs.x).unwrap();
        let (m1, m0) = out.predict(0, &phi);
        assert_relative_eq!(a, (m1 - m0).mean(), epsilon = 1e-9);
    }

    #[test]
    fn gamma_scales_quadratically() {
        let obs = data(600, 2, 3);
        let spec = SplineSpec::new(1, 0);
        let prop = fit_propensity(&obs, &spec, 0.01, NewtonOptions::default()).unwrap();
        let g1 = gamma_hat(&obs, &prop, &fit_outcomes(&obs, &spec).unwrap()).unwrap();
        let mut scaled = obs.clone();
        scaled.y *= 3.0;
        let g3 = gamma_hat(&scaled, &prop, &fit_outcomes(&scaled, &spec).unwrap()).unwrap();
        for (a, b) in g1.iter().zip(g3.iter()) {
            assert_relative_eq!(9.0 * a, *b, max_relative = 1e-8, epsilon = 1e-14);
        }
    }

    #[test]
    fn gamma_psd_with_positive_diagonal() {
        let obs = data(800, 3, 4);
        let spec = SplineSpec::new(3, 1);
        let prop = fit_propensity(&obs, &spec, 0.01, NewtonOptions::default()).unwrap();
        let g = gamma_hat(&obs, &prop, &fit_outcomes(&obs, &spec).unwrap()).unwrap();
        assert!(g.diagonal().iter().all(|&v| v > 0.0));
        assert!(g.clone().symmetric_eigen().eigenvalues.iter().all(|&v| v > -1e-14));
    }

    #[test]
    fn duplicated_data_divides_gamma_exactly() {
        let obs = data(500, 2, 5);
        let spec = SplineSpec::new(1, 0);
        let prop = fit_propensity(&obs, &spec, 0.01, NewtonOptions::default()).unwrap();
        let out = fit_outcomes(&obs, &spec).unwrap();
        let g1 = gamma_hat(&obs, &prop, &out).unwrap();
        let dup = PooledObservations {
            x: DMatrix::from_fn(1000, 2, |i, c| obs.x[(i % 500, c)]),
            a: DMatrix::from_fn(1000, 2, |i, c| obs.a[(i % 500, c)]),
            y: DVector::from_fn(1000, |i, _| obs.y[i % 500]),
        };
        let g2 = gamma_hat(&dup, &prop, &out).unwrap();
        for (a, b) in g1.iter().zip(g2.iter()) {
            assert_relative_eq!(a / 2.0, *b, max_relative = 1e-10, epsilon = 1e-16);
        }
    }
}
