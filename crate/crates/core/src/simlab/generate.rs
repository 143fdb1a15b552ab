//! Synthetic observational and randomized rounds.
//!
//! Units carry a context `X ~ N(0, Sigma_x)` and a confounder vector `U` drawn
//! from a Gaussian process over the intervention index with an exponential
//! (Matern-1/2) kernel. Interventions are assigned by a logistic model in
//! `X` and `U^j`; the outcome is additive in the assignments, `h(X)` and `U`.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use super::config::{GeneratorConfig, SimConfig};
use crate::data::{InterventionCatalog, ObservationalRound, RctRecord, RctRound, UnitRecord};
use crate::error::{Error, Result};
use crate::estimators::glm::expit;

const MAX_REDRAWS: usize = 100;

/// Draws the covariate covariance: unit diagonal, each off-diagonal pair
/// equal to `cov_offdiag` with probability `cov_offdiag_prob`, else zero.
/// Patterns that are not positive definite are redrawn; after the last
/// attempt the eigenvalues are clipped at `1e-6`.
pub fn covariate_covariance(g: &GeneratorConfig, rng: &mut impl Rng) -> Result<DMatrix<f64>> {
    let p = g.context_dim;
    let mut last = DMatrix::identity(p, p);
    for _ in 0..MAX_REDRAWS {
        let mut s = DMatrix::identity(p, p);
        for a in 0..p {
            for b in a + 1..p {
                if rng.random::<f64>() < g.cov_offdiag_prob {
                    s[(a, b)] = g.cov_offdiag;
                    s[(b, a)] = g.cov_offdiag;
                }
            }
        }
        if s.clone().cholesky().is_some() {
            return Ok(s);
        }
        last = s;
    }
    let eig = last.symmetric_eigen();
    let vals = eig.eigenvalues.map(|v| v.max(1e-6));
    let repaired = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
    let repaired = (&repaired + repaired.transpose()) * 0.5;
    if repaired.clone().cholesky().is_none() {
        return Err(Error::Generation("covariate covariance repair failed".into()));
    }
    Ok(repaired)
}

fn cholesky_factor(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    m.clone()
        .cholesky()
        .map(|c| c.l())
        .ok_or_else(|| Error::Generation(format!("{what} is not positive definite")))
}

/// `n` rows of `N(0, L L^T)` given the lower Cholesky factor `l`.
pub fn gen_covariates(n: usize, l: &DMatrix<f64>, rng: &mut impl Rng) -> DMatrix<f64> {
    let p = l.nrows();
    let z = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
    z * l.transpose()
}

/// `K(j, j') = variance * exp(-|j - j'| / lengthscale)` on the index grid `0..j`.
pub fn matern_half_kernel(j: usize, variance: f64, lengthscale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(j, j, |a, b| variance * (-(a.abs_diff(b) as f64) / lengthscale).exp())
}

/// `n` independent confounder vectors, one per row. `l` is the kernel's
/// Cholesky factor; a zero-variance kernel yields zeros.
pub fn gen_confounder(n: usize, l: &DMatrix<f64>, rng: &mut impl Rng) -> DMatrix<f64> {
    gen_covariates(n, l, rng)
}

/// Fixed quantities of one replication.
#[derive(Debug, Clone)]
pub struct SimWorld {
    pub covariance: DMatrix<f64>,
    cov_chol: DMatrix<f64>,
    /// `None` when the confounder has zero variance.
    gp_chol: Option<DMatrix<f64>>,
    pub catalog: InterventionCatalog,
    pub tau_star: Vec<f64>,
    treated_var: Vec<f64>,
}

impl SimWorld {
    pub fn new(cfg: &SimConfig, rng: &mut impl Rng) -> Result<Self> {
        let g = &cfg.generator;
        let j = cfg.experiment.interventions;
        let covariance = covariate_covariance(g, rng)?;
        let cov_chol = cholesky_factor(&covariance, "covariate covariance")?;
        let gp_chol = if g.kernel_variance > 0.0 {
            Some(cholesky_factor(
                &matern_half_kernel(j, g.kernel_variance, g.kernel_lengthscale),
                "confounder kernel",
            )?)
        } else {
            None
        };
        let attributes: Vec<Vec<f64>> = (0..j)
            .map(|_| (0..g.attribute_dim).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let catalog = InterventionCatalog::new(attributes, cfg.bias_features.clone())?;
        let half = j / 2;
        let tau_star = (0..j)
            .map(|k| if k < half { g.effect_first_half } else { g.effect_second_half })
            .collect();
        let treated_var = (0..j)
            .map(|k| if k < half { g.treated_noise_first_half } else { g.treated_noise_second_half })
            .collect();
        Ok(Self {
            covariance,
            cov_chol,
            gp_chol,
            catalog,
            tau_star,
            treated_var,
        })
    }

    pub fn n_interventions(&self) -> usize {
        self.tau_star.len()
    }

    /// `n` units: contexts, confounders and propensity logits.
    fn units(&self, g: &GeneratorConfig, n: usize, rng: &mut impl Rng) -> (DMatrix<f64>, DMatrix<f64>) {
        let x = gen_covariates(n, &self.cov_chol, rng);
        let u = match &self.gp_chol {
            Some(l) => gen_confounder(n, l, rng),
            None => DMatrix::zeros(n, self.n_interventions()),
        };
        let _ = g;
        (x, u)
    }

    fn propensity(&self, g: &GeneratorConfig, x: &[f64], u_j: f64) -> f64 {
        let lin: f64 = x.iter().sum::<f64>() * g.propensity_coef;
        expit(lin - g.confounder_loading * u_j)
    }

    fn outcome(&self, g: &GeneratorConfig, x: &[f64], u: &[f64], a: &[u8], rng: &mut impl Rng) -> f64 {
        let mut y = 0.0;
        let mut noise_var = 0.0;
        for (k, &ak) in a.iter().enumerate() {
            if ak == 1 {
                y += self.tau_star[k];
                noise_var += self.treated_var[k];
            } else {
                noise_var += g.control_noise;
            }
        }
        let h: f64 = x.iter().sum::<f64>() + g.outcome_pairs.iter().map(|&(p, q)| x[p - 1] * x[q - 1]).sum::<f64>();
        y += g.outcome_coef * h;
        y += g.confounder_coef * u.iter().sum::<f64>();
        // Sum of independent arm-specific noises has this total variance.
        if noise_var > 0.0 {
            y += noise_var.sqrt() * rng.sample::<f64, _>(StandardNormal);
        }
        y
    }

    fn record(&self, g: &GeneratorConfig, x: Vec<f64>, u: &[f64], forced: Option<usize>, rng: &mut impl Rng) -> Result<UnitRecord> {
        let a: Vec<u8> = (0..self.n_interventions())
            .map(|k| {
                let p = if forced == Some(k) { 0.5 } else { self.propensity(g, &x, u[k]) };
                u8::from(rng.random::<f64>() < p)
            })
            .collect();
        let y = self.outcome(g, &x, u, &a, rng);
        UnitRecord::new(x, a, y)
    }
}

fn row(m: &DMatrix<f64>, i: usize) -> Vec<f64> {
    m.row(i).iter().copied().collect()
}

pub fn gen_observational_round(
    cfg: &SimConfig,
    world: &SimWorld,
    round: usize,
    n: usize,
    rng: &mut impl Rng,
) -> Result<ObservationalRound> {
    let g = &cfg.generator;
    let (x, u) = world.units(g, n, rng);
    let records = (0..n)
        .map(|i| world.record(g, row(&x, i), &row(&u, i), None, rng))
        .collect::<Result<Vec<_>>>()?;
    ObservationalRound::new(round, records)
}

/// Randomized round: each unit's randomized intervention is uniform on
/// `selected` and assigned with probability one half; the rest follow the
/// observational mechanism.
pub fn gen_rct_round(
    cfg: &SimConfig,
    world: &SimWorld,
    round: usize,
    selected: &BTreeSet<usize>,
    n: usize,
    rng: &mut impl Rng,
) -> Result<RctRound> {
    if selected.is_empty() {
        return Err(Error::Generation("randomized set is empty".into()));
    }
    let g = &cfg.generator;
    let pool: Vec<usize> = selected.iter().copied().collect();
    let (x, u) = world.units(g, n, rng);
    let records = (0..n)
        .map(|i| {
            let w = pool[rng.random_range(0..pool.len())];
            world
                .record(g, row(&x, i), &row(&u, i), Some(w), rng)
                .map(|base| RctRecord { base, w })
        })
        .collect::<Result<Vec<_>>>()?;
    RctRound::new(round, selected.clone(), records)
}

/// `h(x)` as a vector, for regression checks.
pub fn outcome_features(g: &GeneratorConfig, x: &[f64]) -> DVector<f64> {
    let mut v: Vec<f64> = x.to_vec();
    v.extend(g.outcome_pairs.iter().map(|&(p, q)| x[p - 1] * x[q - 1]));
    DVector::from_vec(v)
}
