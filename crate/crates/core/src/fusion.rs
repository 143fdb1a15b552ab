//! Bias regression, plug-in covariance, risk estimation and the optimal
//! shrinkage factor.
//!
//! The shrinkage estimate is `tau_obs - (1 - lambda) * Psi theta_hat`, so
//! `lambda = 1` gives the observational (DR) estimate and `lambda = 0` the
//! fully debiased one.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};

use crate::data::{EstimateState, InterventionCatalog, LossWeights};
use crate::error::{Error, Result};
use crate::linalg::{cholesky_inverse, gram_cholesky, max_abs, quadratic_form, symmetrize, trace_of_product};

/// Least-squares fit of the observational bias on intervention features.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasFit {
    pub theta_hat: DVector<f64>,
    /// `Psi (Psi_S^T Psi_S)^-1 Psi~_S^T`; columns outside the support are zero.
    pub hat_matrix: DMatrix<f64>,
    /// `Psi theta_hat`.
    pub fitted_bias: DVector<f64>,
    /// Interventions with randomized estimates, ascending.
    pub support: Vec<usize>,
}

/// Hat matrix for the rows of `design` listed in `support`.
pub fn hat_matrix(design: &DMatrix<f64>, support: &[usize]) -> Result<DMatrix<f64>> {
    let (j, p) = design.shape();
    if support.len() < p {
        return Err(Error::Identifiability {
            required: p,
            available: support.len(),
        });
    }
    let psi_s = design.select_rows(support);
    let g_inv = cholesky_inverse(&gram_cholesky(&psi_s.tr_mul(&psi_s))?);
    let proj = design * g_inv;
    let mut h = DMatrix::zeros(j, j);
    for &k in support {
        h.set_column(k, &(&proj * design.row(k).transpose()));
    }
    Ok(h)
}

/// Randomized estimates with masked entries set to zero.
pub fn rct_extended(state: &EstimateState) -> DVector<f64> {
    DVector::from_iterator(state.n_interventions(), state.tau_rct().iter().map(|t| t.unwrap_or(0.0)))
}

pub fn fit_bias(state: &EstimateState, catalog: &InterventionCatalog) -> Result<BiasFit> {
    let psi = catalog.design();
    if psi.nrows() != state.n_interventions() {
        return Err(Error::Dimension {
            what: "catalog interventions",
            expected: state.n_interventions(),
            found: psi.nrows(),
        });
    }
    let support = state.randomized();
    let hat = hat_matrix(psi, &support)?;
    let psi_s = psi.select_rows(&support);
    let resid = DVector::from_iterator(
        support.len(),
        support
            .iter()
            .map(|&k| state.tau_obs()[k] - state.tau_rct()[k].expect("support has RCT estimates")),
    );
    let l = gram_cholesky(&psi_s.tr_mul(&psi_s))?;
    let theta_hat = crate::linalg::cholesky_solve(&l, &psi_s.tr_mul(&resid));
    let fitted_bias = psi * &theta_hat;
    Ok(BiasFit {
        theta_hat,
        hat_matrix: hat,
        fitted_bias,
        support,
    })
}

pub fn fully_debiased(state: &EstimateState, bias: &BiasFit) -> DVector<f64> {
    DVector::from_column_slice(state.tau_obs()) - &bias.fitted_bias
}

/// `(I - H) Gamma (I - H)^T + H diag(upsilon) H^T`, symmetrized, without any PSD repair.
pub fn assemble_sigma(gamma: &DMatrix<f64>, hat: &DMatrix<f64>, upsilon: &[f64]) -> DMatrix<f64> {
    let j = gamma.nrows();
    let resid = DMatrix::identity(j, j) - hat;
    let mut h_scaled = hat.clone();
    for (k, &u) in upsilon.iter().enumerate() {
        h_scaled.column_mut(k).scale_mut(u);
    }
    symmetrize(&(&resid * gamma * resid.transpose() + h_scaled * hat.transpose()))
}

/// Clips eigenvalues in `(-tol, 0)` to zero; larger negative eigenvalues are an error.
pub fn floor_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let tol = 1e-10 * max_abs(m).max(1.0);
    let eig = m.clone().symmetric_eigen();
    let min = eig.eigenvalues.min();
    if min >= 0.0 {
        return Ok(m.clone());
    }
    if min < -tol {
        return Err(Error::Decomposition(format!(
            "covariance has eigenvalue {min:.3e}, below the floor tolerance {tol:.1e}"
        )));
    }
    let vals = eig.eigenvalues.map(|v| v.max(0.0));
    Ok(symmetrize(&(&eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose())))
}

/// Variances with masked entries set to zero, after checking that no masked
/// entry meets a nonzero hat-matrix column.
fn masked_variances(hat: &DMatrix<f64>, upsilon: &[Option<f64>]) -> Result<Vec<f64>> {
    upsilon
        .iter()
        .enumerate()
        .map(|(k, u)| match u {
            Some(v) => Ok(*v),
            None if hat.column(k).iter().all(|&h| h == 0.0) => Ok(0.0),
            None => Err(Error::MaskedVariance { j: k + 1 }),
        })
        .collect()
}

pub fn sigma_hat(state: &EstimateState, bias: &BiasFit) -> Result<DMatrix<f64>> {
    let ups = masked_variances(&bias.hat_matrix, state.upsilon_hat())?;
    floor_psd(&assemble_sigma(state.gamma_hat(), &bias.hat_matrix, &ups))
}

/// `Omega` with `Omega Sigma Omega^T = I` and `Omega^-T D Omega^-1 = diag(lambda_diag)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalizationPair {
    pub omega: DMatrix<f64>,
    /// Ascending.
    pub lambda_diag: DVector<f64>,
}

pub fn simultaneous_diagonalize(sigma: &DMatrix<f64>, d: &DMatrix<f64>) -> Result<DiagonalizationPair> {
    if sigma.shape() != d.shape() || !sigma.is_square() {
        return Err(Error::Dimension {
            what: "diagonalization pair",
            expected: sigma.nrows(),
            found: d.nrows(),
        });
    }
    let chol = symmetrize(sigma)
        .cholesky()
        .ok_or_else(|| Error::Decomposition("covariance is not positive definite".into()))?;
    let l = chol.l();
    let c = l.transpose();
    let inner = symmetrize(&(&c * d * l.clone()));
    let eig = inner.symmetric_eigen();
    if eig.eigenvalues.min() <= 0.0 {
        return Err(Error::Decomposition("weight matrix is not positive definite".into()));
    }
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let o = eig.eigenvectors.select_columns(&order);
    let lambda_diag = DVector::from_iterator(order.len(), order.iter().map(|&k| eig.eigenvalues[k]));
    let l_inv = l
        .solve_lower_triangular(&DMatrix::identity(l.nrows(), l.nrows()))
        .ok_or_else(|| Error::Decomposition("singular Cholesky factor".into()))?;
    Ok(DiagonalizationPair {
        omega: o.transpose() * l_inv,
        lambda_diag,
    })
}

/// Coefficients of the empirical risk `trace + lambda^2 quad + 2 lambda cross`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RiskTerms {
    /// `tr(D Sigma)`.
    pub trace: f64,
    /// `(Psi theta)^T D (Psi theta)`.
    pub quad: f64,
    /// `tr{D Gamma (I - H)^T} - tr(D Sigma)`.
    pub cross: f64,
}

impl RiskTerms {
    pub fn eval(&self, lambda: f64) -> f64 {
        self.trace + lambda * lambda * self.quad + 2.0 * lambda * self.cross
    }

    /// Unconstrained minimizer; `None` when the quadratic coefficient vanishes.
    pub fn raw_optimum(&self) -> Option<f64> {
        (self.quad > 0.0).then(|| -self.cross / self.quad)
    }

    /// `trace - num^2 / den`, the minimum of the unconstrained quadratic.
    pub fn closed_form_minimum(&self) -> Option<f64> {
        (self.quad > 0.0).then(|| self.trace - self.cross * self.cross / self.quad)
    }
}

fn cross_term(d: &DMatrix<f64>, gamma: &DMatrix<f64>, hat: &DMatrix<f64>, trace: f64) -> f64 {
    let j = hat.nrows();
    let resid_t = (DMatrix::identity(j, j) - hat).transpose();
    trace_of_product(d, &(gamma * resid_t)) - trace
}

pub fn risk_terms(state: &EstimateState, bias: &BiasFit, sigma: &DMatrix<f64>, d: &LossWeights) -> RiskTerms {
    let dm = d.matrix();
    let trace = trace_of_product(dm, sigma);
    RiskTerms {
        trace,
        quad: quadratic_form(dm, &bias.fitted_bias),
        cross: cross_term(dm, state.gamma_hat(), &bias.hat_matrix, trace),
    }
}

pub fn eure_risk(state: &EstimateState, bias: &BiasFit, sigma: &DMatrix<f64>, lambda: f64, d: &LossWeights) -> f64 {
    risk_terms(state, bias, sigma, d).eval(lambda)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimalLambda {
    /// Clamped to `[0, 1]`.
    pub lambda_hat: f64,
    pub raw: f64,
    /// Empirical risk at `lambda_hat`.
    pub eure: f64,
}

pub fn optimal_lambda_from_terms(terms: &RiskTerms) -> Result<OptimalLambda> {
    let raw = terms.raw_optimum().ok_or(Error::DegenerateBias)?;
    let lambda_hat = raw.clamp(0.0, 1.0);
    Ok(OptimalLambda {
        lambda_hat,
        raw,
        eure: terms.eval(lambda_hat),
    })
}

pub fn optimal_lambda(
    state: &EstimateState,
    bias: &BiasFit,
    sigma: &DMatrix<f64>,
    d: &LossWeights,
) -> Result<OptimalLambda> {
    optimal_lambda_from_terms(&risk_terms(state, bias, sigma, d))
}

pub fn shrink(state: &EstimateState, bias: &BiasFit, lambda: f64) -> Result<DVector<f64>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Domain(format!("shrinkage factor {lambda} outside [0, 1]")));
    }
    Ok(DVector::from_column_slice(state.tau_obs()) - &bias.fitted_bias * (1.0 - lambda))
}

/// Exact risk of the shrinkage estimator when the observational estimate has
/// mean `tau* + bias_truth` and covariance `gamma`, and the randomized one is
/// unbiased with diagonal covariance folded into `sigma`. Normalized by `J`.
///
/// Test oracle for the empirical risk; `bias_truth` must lie in the column
/// space of the design for the debiased estimate to be unbiased.
pub fn analytic_risk(
    d: &LossWeights,
    sigma: &DMatrix<f64>,
    gamma: &DMatrix<f64>,
    hat: &DMatrix<f64>,
    lambda: f64,
    bias_truth: &DVector<f64>,
) -> Result<f64> {
    let dm = d.matrix();
    let pair = simultaneous_diagonalize(sigma, dm)?;
    let p = dm.nrows() as f64;
    let ob = &pair.omega * bias_truth;
    let bias_quad: f64 = ob.iter().zip(pair.lambda_diag.iter()).map(|(b, l)| b * b * l).sum();
    // Covariance of Y - Z = H(Y - R) is H Gamma H^T + Sigma - (I-H) Gamma (I-H)^T.
    let j = dm.nrows();
    let resid = DMatrix::identity(j, j) - hat;
    let cov_diff = hat * gamma * hat.transpose() + sigma - &resid * gamma * resid.transpose();
    let trace = pair.lambda_diag.sum();
    let quad = bias_quad + trace_of_product(dm, &cov_diff);
    let cross = cross_term(dm, gamma, hat, trace_of_product(dm, sigma));
    Ok((trace + lambda * lambda * quad + 2.0 * lambda * cross) / p)
}

/// Everything produced by one fusion pass.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionResult {
    pub bias: BiasFit,
    pub sigma_hat: DMatrix<f64>,
    pub terms: RiskTerms,
    pub lambda_hat: f64,
    /// `None` when the fitted bias is zero.
    pub lambda_raw: Option<f64>,
    pub tau_shrunk: DVector<f64>,
    pub eure: f64,
    /// Set when the fitted bias vanished and the DR estimate (`lambda = 1`) was used.
    pub degenerate_bias: bool,
}

pub fn fuse(state: &EstimateState, catalog: &InterventionCatalog, d: &LossWeights) -> Result<FusionResult> {
    if d.dim() != state.n_interventions() {
        return Err(Error::Dimension {
            what: "loss weights",
            expected: state.n_interventions(),
            found: d.dim(),
        });
    }
    let bias = fit_bias(state, catalog)?;
    let sigma = sigma_hat(state, &bias)?;
    let terms = risk_terms(state, &bias, &sigma, d);
    let (lambda_hat, lambda_raw, degenerate) = match optimal_lambda_from_terms(&terms) {
        Ok(opt) => (opt.lambda_hat, Some(opt.raw), false),
        Err(Error::DegenerateBias) => (1.0, None, true),
        Err(e) => return Err(e),
    };
    let tau_shrunk = shrink(state, &bias, lambda_hat)?;
    Ok(FusionResult {
        eure: terms.eval(lambda_hat),
        bias,
        sigma_hat: sigma,
        terms,
        lambda_hat,
        lambda_raw,
        tau_shrunk,
        degenerate_bias: degenerate,
    })
}

/// `(lambda, eure)` on `points` equally spaced values in `[0, 1]`.
pub fn risk_curve(terms: &RiskTerms, points: usize) -> Vec<(f64, f64)> {
    let steps = points.max(2) - 1;
    (0..=steps)
        .map(|i| {
            let l = i as f64 / steps as f64;
            (l, terms.eval(l))
        })
        .collect()
}

pub fn risk_curve_csv(curve: &[(f64, f64)]) -> String {
    let mut s = String::from("lambda,eure\n");
    for (l, r) in curve {
        let _ = writeln!(s, "{l},{r}");
    }
    s
}
