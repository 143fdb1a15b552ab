//! Choosing which interventions to randomize in the next round.
//!
//! RCT variances get a hierarchical prior `Upsilon ~ InvGamma(alpha, beta)`,
//! `beta ~ Gamma(eta0, lambda0)`. Thompson sampling draws one variance per
//! intervention, predicts the next-round covariance for each candidate and
//! keeps the candidates with the smallest predicted risk.

use std::collections::BTreeSet;
use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::data::{EstimateState, LossWeights};
use crate::error::{Error, Result};
use crate::fusion::{assemble_sigma, hat_matrix, FusionResult, RiskTerms};
use crate::linalg::trace_of_product;
use crate::rng::{stream, SimRng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Hyperparams {
    /// Inverse-Gamma shape.
    pub alpha: f64,
    /// Gamma shape of the prior on `beta`.
    pub eta0: f64,
    /// Gamma rate of the prior on `beta`.
    pub lambda0: f64,
    /// Standard deviations added to the posterior mean in the UCB selector.
    pub ucb_multiplier: f64,
    /// Treatment of the bias quadratic in the predicted next-round risk.
    pub quadratic: QuadraticTerm,
}

/// How the predicted next-round risk treats `(Psi theta)^T D (Psi theta)`.
///
/// `Held` keeps the current value. `Expected` replaces it by its conditional
/// expectation given the candidate: the current value minus the current
/// variance part `tr(D H (Gamma + Upsilon) H^T)` plus the predicted one. Under
/// `Held` a shrinkage factor above one half makes new randomized data look
/// harmful; under `Expected` the RCT variance enters with weight
/// `(1 - lambda)^2` and extra data never raises the prediction.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuadraticTerm {
    Held,
    #[default]
    Expected,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            alpha: 5.0,
            eta0: 10.0,
            lambda0: 0.05,
            ucb_multiplier: 1.0,
            quadratic: QuadraticTerm::default(),
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 1.0) {
            return Err(Error::Domain(format!("alpha = {} must exceed 1", self.alpha)));
        }
        if !(self.eta0 > 0.0) || !(self.lambda0 > 0.0) {
            return Err(Error::Domain(format!(
                "eta0 = {} and lambda0 = {} must be positive",
                self.eta0, self.lambda0
            )));
        }
        if !(self.ucb_multiplier >= 0.0) {
            return Err(Error::Domain(format!("ucb_multiplier = {} is negative", self.ucb_multiplier)));
        }
        Ok(())
    }

    /// Sets `eta0` so the prior mean of `Upsilon` equals the average of
    /// `r_j * upsilon_hat_j` over the first randomized set.
    pub fn calibrated(&self, state: &EstimateState) -> Result<Self> {
        let first = state
            .selected_history()
            .first()
            .ok_or_else(|| Error::Domain("prior calibration needs a randomized round".into()))?;
        let vals: Vec<f64> = first
            .iter()
            .filter_map(|&j| state.upsilon_hat()[j].map(|u| u * state.r_counts()[j] as f64))
            .collect();
        if vals.is_empty() {
            return Err(Error::Domain("first randomized set has no variance estimates".into()));
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let out = Self {
            eta0: self.lambda0 * (self.alpha - 1.0) * mean,
            ..*self
        };
        out.validate()?;
        Ok(out)
    }
}

/// Gamma posterior of `beta^j` for every intervention.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignPosterior {
    pub shape: Vec<f64>,
    pub rate: Vec<f64>,
    pub r_counts: Vec<usize>,
}

impl DesignPosterior {
    /// Posterior-predictive mean of `Upsilon^jj`.
    pub fn mean_variance(&self, j: usize, alpha: f64) -> f64 {
        self.shape[j] / (self.rate[j] * (alpha - 1.0))
    }

    /// Posterior-predictive standard deviation of `Upsilon^jj`; infinite unless `alpha > 2`.
    pub fn sd_variance(&self, j: usize, alpha: f64) -> f64 {
        if alpha <= 2.0 {
            return f64::INFINITY;
        }
        let (a, b) = (self.shape[j], self.rate[j]);
        let e_beta2 = a * (a + 1.0) / (b * b);
        let var_beta = a / (b * b);
        let am1 = alpha - 1.0;
        (e_beta2 / (am1 * am1 * (alpha - 2.0)) + var_beta / (am1 * am1)).sqrt()
    }
}

pub fn posterior_update(hyper: &Hyperparams, upsilon_hat: &[Option<f64>], r_counts: &[usize]) -> Result<DesignPosterior> {
    hyper.validate()?;
    if upsilon_hat.len() != r_counts.len() {
        return Err(Error::Dimension {
            what: "variance estimates",
            expected: r_counts.len(),
            found: upsilon_hat.len(),
        });
    }
    let mut shape = Vec::with_capacity(r_counts.len());
    let mut rate = Vec::with_capacity(r_counts.len());
    for (j, (&r, u)) in r_counts.iter().zip(upsilon_hat).enumerate() {
        match (r, u) {
            (0, None) => {
                shape.push(hyper.eta0);
                rate.push(hyper.lambda0);
            }
            (r, Some(u)) if r > 0 => {
                if !(*u > 0.0) {
                    return Err(Error::Domain(format!("intervention {}: variance {u} is not positive", j + 1)));
                }
                shape.push(hyper.eta0 + r as f64 * hyper.alpha);
                rate.push(hyper.lambda0 + 1.0 / u);
            }
            _ => {
                return Err(Error::Validation(format!(
                    "intervention {}: variance availability disagrees with count {r}",
                    j + 1
                )))
            }
        }
    }
    Ok(DesignPosterior {
        shape,
        rate,
        r_counts: r_counts.to_vec(),
    })
}

/// Source of the two draws Thompson sampling needs. Implemented for every
/// [`Rng`]; tests substitute deterministic values.
pub trait PosteriorDraws {
    fn gamma(&mut self, shape: f64, rate: f64) -> f64;
    /// Draw from `InvGamma(shape, scale)`, i.e. `scale / Gamma(shape, 1)`.
    fn inv_gamma(&mut self, shape: f64, scale: f64) -> f64;
}

impl<R: Rng + ?Sized> PosteriorDraws for R {
    fn gamma(&mut self, shape: f64, rate: f64) -> f64 {
        Gamma::new(shape, 1.0 / rate).expect("positive gamma parameters").sample(self)
    }

    fn inv_gamma(&mut self, shape: f64, scale: f64) -> f64 {
        let g: f64 = Gamma::new(shape, 1.0).expect("positive gamma shape").sample(self);
        scale / g
    }
}

/// One posterior-predictive draw of `Upsilon^jj` per intervention.
pub fn sample_variances(post: &DesignPosterior, hyper: &Hyperparams, draws: &mut (impl PosteriorDraws + ?Sized)) -> Vec<f64> {
    (0..post.shape.len())
        .map(|j| {
            let beta = draws.gamma(post.shape[j], post.rate[j]);
            draws.inv_gamma(hyper.alpha, beta)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Random,
    Dopt,
    Ucb,
    Thompson,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Random, Method::Dopt, Method::Ucb, Method::Thompson];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Random => "random",
            Method::Dopt => "dopt",
            Method::Ucb => "ucb",
            Method::Thompson => "thompson",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Domain(format!("unknown selection method '{s}' (expected random, dopt, ucb or thompson)")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionDecision {
    pub method: Method,
    pub seed: u64,
    pub chosen: BTreeSet<usize>,
    /// Lower is better; `+inf` marks ineligible interventions.
    pub scores: Vec<f64>,
}

impl SelectionDecision {
    pub fn log_header(n_interventions: usize) -> String {
        let mut s = String::from("round,method,seed,chosen_indices");
        for j in 1..=n_interventions {
            let _ = write!(s, ",score_{j}");
        }
        s
    }

    pub fn log_row(&self, round: usize) -> String {
        let mut s = format!(
            "{round},{},{},{}",
            self.method,
            self.seed,
            crate::output::format_indices(&self.chosen)
        );
        for v in &self.scores {
            let _ = write!(s, ",{v}");
        }
        s
    }
}

/// Indices of the `n` smallest scores; ties go to the lower index.
pub fn smallest(scores: &[f64], n: usize) -> BTreeSet<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    idx.into_iter().take(n).collect()
}

fn check_batch(j: usize, n: usize) -> Result<()> {
    if n == 0 || n > j {
        return Err(Error::Domain(format!("batch size {n} must be in 1..={j}")));
    }
    Ok(())
}

/// Marks excluded interventions ineligible and checks enough remain.
fn apply_exclusion(scores: &mut [f64], excluded: Option<&BTreeSet<usize>>, n: usize) -> Result<()> {
    if let Some(ex) = excluded {
        for &k in ex {
            if k < scores.len() {
                scores[k] = f64::INFINITY;
            }
        }
        let left = scores.len() - ex.iter().filter(|&&k| k < scores.len()).count();
        if left < n {
            return Err(Error::Domain(format!(
                "only {left} interventions remain unselected, batch needs {n}"
            )));
        }
    }
    Ok(())
}

/// Inputs shared by the risk-based selectors.
#[derive(Debug, Clone, Copy)]
pub struct DesignContext<'a> {
    pub state: &'a EstimateState,
    /// `J × p_v` intervention features.
    pub design: &'a DMatrix<f64>,
    pub fusion: &'a FusionResult,
    pub weights: &'a LossWeights,
    pub quadratic: QuadraticTerm,
}

/// Predicted risk after randomizing `k` with `l_next` records, given sampled
/// per-record variances. The shrinkage factor is held at `lambda_fixed`; the
/// bias quadratic follows `ctx.quadratic`. A candidate without randomized data
/// joins the bias-regression support, so its own variance enters the prediction.
pub fn next_stage_risk(ctx: &DesignContext<'_>, sampled: &[f64], k: usize, l_next: usize, lambda_fixed: f64) -> Result<f64> {
    let j = ctx.state.n_interventions();
    if sampled.len() != j {
        return Err(Error::Dimension {
            what: "sampled variances",
            expected: j,
            found: sampled.len(),
        });
    }
    if k >= j {
        return Err(Error::Domain(format!("candidate {} outside 1..={j}", k + 1)));
    }
    let support = &ctx.fusion.bias.support;
    let augmented;
    let hat = if l_next > 0 && !support.contains(&k) {
        let mut s = support.clone();
        s.push(k);
        s.sort_unstable();
        augmented = hat_matrix(ctx.design, &s)?;
        &augmented
    } else {
        &ctx.fusion.bias.hat_matrix
    };
    let counts = ctx.state.r_counts();
    let mut next = Vec::with_capacity(j);
    for i in 0..j {
        let n = counts[i] + if i == k { l_next } else { 0 };
        if n == 0 {
            if hat.column(i).iter().any(|&h| h != 0.0) {
                return Err(Error::MaskedVariance { j: i + 1 });
            }
            next.push(0.0);
        } else {
            next.push(sampled[i] / n as f64);
        }
    }
    let sigma = assemble_sigma(ctx.state.gamma_hat(), hat, &next);
    let d = ctx.weights.matrix();
    let trace = trace_of_product(d, &sigma);
    let resid_t = (DMatrix::identity(j, j) - hat).transpose();
    let quad = match ctx.quadratic {
        QuadraticTerm::Held => ctx.fusion.terms.quad,
        QuadraticTerm::Expected => {
            let current: Vec<f64> = ctx.state.upsilon_hat().iter().map(|u| u.unwrap_or(0.0)).collect();
            let signal = ctx.fusion.terms.quad - projected_variance(ctx, &ctx.fusion.bias.hat_matrix, &current);
            signal.max(0.0) + projected_variance(ctx, hat, &next)
        }
    };
    let terms = RiskTerms {
        trace,
        quad,
        cross: trace_of_product(d, &(ctx.state.gamma_hat() * resid_t)) - trace,
    };
    Ok(terms.eval(lambda_fixed))
}

/// `tr(D H (Gamma + diag(upsilon)) H^T)`, the variance part of the bias quadratic.
fn projected_variance(ctx: &DesignContext<'_>, hat: &DMatrix<f64>, upsilon: &[f64]) -> f64 {
    let mut cov = ctx.state.gamma_hat().clone();
    for (i, u) in upsilon.iter().enumerate() {
        cov[(i, i)] += u;
    }
    trace_of_product(ctx.weights.matrix(), &(hat * cov * hat.transpose()))
}

fn risk_scores(
    ctx: &DesignContext<'_>,
    variances: &[f64],
    n: usize,
    l_next: usize,
    excluded: Option<&BTreeSet<usize>>,
) -> Result<Vec<f64>> {
    let j = ctx.state.n_interventions();
    check_batch(j, n)?;
    let lambda = ctx.fusion.lambda_hat;
    let mut scores = (0..j)
        .map(|k| {
            if excluded.is_some_and(|e| e.contains(&k)) {
                Ok(f64::INFINITY)
            } else {
                next_stage_risk(ctx, variances, k, l_next, lambda)
            }
        })
        .collect::<Result<Vec<f64>>>()?;
    apply_exclusion(&mut scores, excluded, n)?;
    Ok(scores)
}

/// Thompson selection with an injected source of posterior draws.
pub fn select_thompson_with(
    ctx: &DesignContext<'_>,
    hyper: &Hyperparams,
    n: usize,
    l_next: usize,
    draws: &mut (impl PosteriorDraws + ?Sized),
    seed: u64,
    excluded: Option<&BTreeSet<usize>>,
) -> Result<SelectionDecision> {
    let post = posterior_update(hyper, ctx.state.upsilon_hat(), ctx.state.r_counts())?;
    let sampled = sample_variances(&post, hyper, draws);
    let scores = risk_scores(ctx, &sampled, n, l_next, excluded)?;
    Ok(SelectionDecision {
        method: Method::Thompson,
        seed,
        chosen: smallest(&scores, n),
        scores,
    })
}

pub fn select_thompson(
    ctx: &DesignContext<'_>,
    hyper: &Hyperparams,
    n: usize,
    l_next: usize,
    seed: u64,
    excluded: Option<&BTreeSet<usize>>,
) -> Result<SelectionDecision> {
    let mut rng: SimRng = stream(seed, &[]);
    select_thompson_with(ctx, hyper, n, l_next, &mut rng, seed, excluded)
}

/// Optimistic variances: posterior-predictive mean plus `ucb_multiplier` standard deviations.
pub fn ucb_variances(post: &DesignPosterior, hyper: &Hyperparams) -> Result<Vec<f64>> {
    if hyper.ucb_multiplier > 0.0 && hyper.alpha <= 2.0 {
        return Err(Error::Domain(format!(
            "UCB needs alpha > 2 for a finite variance, got {}",
            hyper.alpha
        )));
    }
    Ok((0..post.shape.len())
        .map(|j| {
            let sd = if hyper.ucb_multiplier > 0.0 {
                hyper.ucb_multiplier * post.sd_variance(j, hyper.alpha)
            } else {
                0.0
            };
            post.mean_variance(j, hyper.alpha) + sd
        })
        .collect())
}

pub fn select_ucb(
    ctx: &DesignContext<'_>,
    hyper: &Hyperparams,
    n: usize,
    l_next: usize,
    excluded: Option<&BTreeSet<usize>>,
) -> Result<SelectionDecision> {
    let post = posterior_update(hyper, ctx.state.upsilon_hat(), ctx.state.r_counts())?;
    let vars = ucb_variances(&post, hyper)?;
    let scores = risk_scores(ctx, &vars, n, l_next, excluded)?;
    Ok(SelectionDecision {
        method: Method::Ucb,
        seed: 0,
        chosen: smallest(&scores, n),
        scores,
    })
}

/// Uniform sample of `n` interventions; `excluded` removes earlier choices.
pub fn select_random(j: usize, n: usize, seed: u64, excluded: Option<&BTreeSet<usize>>) -> Result<SelectionDecision> {
    check_batch(j, n)?;
    let mut rng: SimRng = stream(seed, &[]);
    let mut scores: Vec<f64> = (0..j).map(|_| rng.random::<f64>()).collect();
    apply_exclusion(&mut scores, excluded, n)?;
    Ok(SelectionDecision {
        method: Method::Random,
        seed,
        chosen: smallest(&scores, n),
        scores,
    })
}

/// Greedy D-optimal additions until every intervention has been randomized
/// once, then uniform sampling. `history` holds every intervention chosen so far.
pub fn select_dopt(
    design: &DMatrix<f64>,
    history: &BTreeSet<usize>,
    n: usize,
    seed: u64,
    without_replacement: bool,
) -> Result<SelectionDecision> {
    let (j, p) = design.shape();
    check_batch(j, n)?;
    let excluded = without_replacement.then_some(history);
    let uncovered: Vec<usize> = (0..j).filter(|k| !history.contains(k)).collect();
    if uncovered.is_empty() {
        let mut d = select_random(j, n, seed, excluded)?;
        d.method = Method::Dopt;
        return Ok(d);
    }
    let mut info = DMatrix::identity(p, p) * 1e-8;
    for &k in history {
        let r = design.row(k).transpose();
        info += &r * r.transpose();
    }
    let mut scores = vec![f64::INFINITY; j];
    let mut picked = 0usize;
    let mut remaining = uncovered.clone();
    while picked < n && !remaining.is_empty() {
        let inv = info
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Decomposition("information matrix lost definiteness".into()))?
            .inverse();
        // log det(M + v v^T) = log det M + ln(1 + v^T M^-1 v).
        let gain = |k: usize| {
            let v = design.row(k).transpose();
            (v.transpose() * &inv * &v)[(0, 0)]
        };
        let (pos, &best) = remaining
            .iter()
            .enumerate()
            .max_by(|a, b| gain(*a.1).total_cmp(&gain(*b.1)).then(b.1.cmp(a.1)))
            .expect("nonempty");
        scores[best] = picked as f64;
        let v = design.row(best).transpose();
        info += &v * v.transpose();
        remaining.remove(pos);
        picked += 1;
    }
    if picked < n {
        let mut rng: SimRng = stream(seed, &[]);
        let mut keys: Vec<(usize, f64)> = (0..j)
            .filter(|&k| scores[k].is_infinite() && !(without_replacement && history.contains(&k)))
            .map(|k| (k, rng.random::<f64>()))
            .collect();
        if keys.len() < n - picked {
            return Err(Error::Domain(format!(
                "only {} interventions remain unselected, batch needs {}",
                keys.len() + picked,
                n
            )));
        }
        for (k, u) in keys.drain(..) {
            scores[k] = picked as f64 + u;
        }
    }
    Ok(SelectionDecision {
        method: Method::Dopt,
        seed,
        chosen: smallest(&scores, n),
        scores,
    })
}

/// Dispatches to the selector named by `method`.
#[allow(clippy::too_many_arguments)]
pub fn select(
    method: Method,
    ctx: &DesignContext<'_>,
    hyper: &Hyperparams,
    n: usize,
    l_next: usize,
    seed: u64,
    history: &BTreeSet<usize>,
    without_replacement: bool,
) -> Result<SelectionDecision> {
    let excluded = without_replacement.then_some(history);
    match method {
        Method::Random => select_random(ctx.state.n_interventions(), n, seed, excluded),
        Method::Dopt => select_dopt(ctx.design, history, n, seed, without_replacement),
        Method::Ucb => select_ucb(ctx, hyper, n, l_next, excluded).map(|mut d| {
            d.seed = seed;
            d
        }),
        Method::Thompson => select_thompson(ctx, hyper, n, l_next, seed, excluded),
    }
}
