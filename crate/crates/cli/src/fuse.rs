//! Single-shot fusion on user data and design selection from a fusion report.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use fusionlab_core::basis::SplineSpec;
use fusionlab_core::data::{load_catalog_attributes, load_round, RoundFile, Schema};
use fusionlab_core::design::{select, DesignContext, Hyperparams, Method, SelectionDecision};
use fusionlab_core::estimators::{combine, observational_estimates, EstimatorSettings};
use fusionlab_core::fusion::{fuse, FusionResult, RiskTerms};
use fusionlab_core::output::{atomic_write, parse_indices};
use fusionlab_core::{EstimateState, FeatureMap, InterventionCatalog, LossWeights, ObservationalRound, RctRound};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::UsageError;

/// Everything `fuse` reports, plus the inputs `select` needs to rebuild the
/// fusion. Intervention indices are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionReport {
    pub tau_obs: Vec<f64>,
    /// `null` where an intervention has no randomized data.
    pub tau_rct: Vec<Option<f64>>,
    pub theta_hat: Vec<f64>,
    pub lambda_hat: f64,
    /// Unclamped minimizer; `null` when the fitted bias is zero.
    pub lambda_raw: Option<f64>,
    pub degenerate_bias: bool,
    pub tau_shrunk: Vec<f64>,
    pub eure: f64,
    pub sigma_diag: Vec<f64>,
    pub risk_terms: RiskTerms,
    pub gamma_hat: Vec<Vec<f64>>,
    pub upsilon_hat: Vec<Option<f64>>,
    pub r_counts: Vec<usize>,
    pub selected_history: Vec<Vec<usize>>,
    /// Bias-model features, one row per intervention.
    pub design: Vec<Vec<f64>>,
    pub weights: Vec<Vec<f64>>,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn matrix(rows: &[Vec<f64>], what: &str) -> anyhow::Result<DMatrix<f64>> {
    let n = rows.len();
    let p = rows.first().map_or(0, Vec::len);
    if n == 0 || rows.iter().any(|r| r.len() != p) {
        return Err(UsageError(anyhow!("report field {what} is not a rectangular matrix")).into());
    }
    Ok(DMatrix::from_fn(n, p, |i, k| rows[i][k]))
}

impl FusionReport {
    pub fn new(state: &EstimateState, catalog: &InterventionCatalog, d: &LossWeights, f: &FusionResult) -> Self {
        Self {
            tau_obs: state.tau_obs().to_vec(),
            tau_rct: state.tau_rct().to_vec(),
            theta_hat: f.bias.theta_hat.iter().copied().collect(),
            lambda_hat: f.lambda_hat,
            lambda_raw: f.lambda_raw,
            degenerate_bias: f.degenerate_bias,
            tau_shrunk: f.tau_shrunk.iter().copied().collect(),
            eure: f.eure,
            sigma_diag: f.sigma_hat.diagonal().iter().copied().collect(),
            risk_terms: f.terms,
            gamma_hat: rows(state.gamma_hat()),
            upsilon_hat: state.upsilon_hat().to_vec(),
            r_counts: state.r_counts().to_vec(),
            selected_history: state
                .selected_history()
                .iter()
                .map(|s| s.iter().map(|j| j + 1).collect())
                .collect(),
            design: rows(catalog.design()),
            weights: rows(d.matrix()),
        }
    }

    /// Rebuilds the estimate state, feature catalog and loss weights.
    pub fn inputs(&self) -> anyhow::Result<(EstimateState, InterventionCatalog, LossWeights)> {
        let history = self
            .selected_history
            .iter()
            .map(|s| {
                s.iter()
                    .map(|&j| j.checked_sub(1).ok_or_else(|| anyhow!("selected index 0 in report")))
                    .collect::<anyhow::Result<BTreeSet<usize>>>()
            })
            .collect::<anyhow::Result<Vec<_>>>()
            .map_err(UsageError)?;
        let state = EstimateState::new(
            self.tau_obs.clone(),
            self.tau_rct.clone(),
            matrix(&self.gamma_hat, "gamma_hat")?,
            self.upsilon_hat.clone(),
            self.r_counts.clone(),
            history,
        )
        .map_err(|e| UsageError(e.into()))?;
        let catalog = InterventionCatalog::from_design(&matrix(&self.design, "design")?)?;
        let weights = LossWeights::new(matrix(&self.weights, "weights")?).map_err(|e| UsageError(e.into()))?;
        Ok((state, catalog, weights))
    }
}

/// `path` or `path@i,j,...` with 1-based selected indices.
pub fn parse_rct_arg(arg: &str) -> anyhow::Result<(PathBuf, Option<BTreeSet<usize>>)> {
    match arg.rsplit_once('@') {
        None => Ok((PathBuf::from(arg), None)),
        Some((path, list)) => {
            let idx = parse_indices(&list.replace(',', ";"))
                .filter(|v| !v.is_empty())
                .ok_or_else(|| UsageError(anyhow!("'{arg}': selected set must be 1-based indices like @1,3")))?;
            Ok((PathBuf::from(path), Some(idx.into_iter().collect())))
        }
    }
}

/// `identity`, `intercept`, `linear` or `spline[:degree[:knots]]`.
pub fn parse_features(s: &str) -> anyhow::Result<FeatureMap> {
    let mut parts = s.split(':');
    let kind = parts.next().unwrap_or_default();
    let num = |p: Option<&str>, default: usize| -> anyhow::Result<usize> {
        p.map_or(Ok(default), |v| {
            v.parse().map_err(|_| UsageError(anyhow!("feature map '{s}': '{v}' is not an integer")).into())
        })
    };
    let fm = match kind {
        "identity" => FeatureMap::Identity,
        "intercept" => FeatureMap::Intercept,
        "linear" => FeatureMap::Linear,
        "spline" => FeatureMap::Spline(SplineSpec::new(num(parts.next(), 3)?, num(parts.next(), 0)?)),
        _ => {
            return Err(UsageError(anyhow!(
                "unknown feature map '{s}' (expected identity, intercept, linear or spline[:degree[:knots]])"
            ))
            .into())
        }
    };
    if parts.next().is_some() {
        return Err(UsageError(anyhow!("feature map '{s}' has too many fields")).into());
    }
    Ok(fm)
}

/// `identity` for `I/J`, or comma-separated diagonal weights.
pub fn parse_weights(s: &str, j: usize) -> anyhow::Result<LossWeights> {
    if s == "identity" {
        return Ok(LossWeights::scaled_identity(j));
    }
    let w = s
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| UsageError(anyhow!("weights '{s}' must be 'identity' or numbers separated by commas")))?;
    if w.len() != j {
        return Err(UsageError(anyhow!("{} weights given for {j} interventions", w.len())).into());
    }
    LossWeights::diagonal(&w).map_err(|e| UsageError(e.into()).into())
}

pub fn load_estimator_settings(path: Option<&Path>) -> anyhow::Result<EstimatorSettings> {
    let Some(path) = path else {
        return Ok(EstimatorSettings::default());
    };
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))
        .map_err(UsageError)?;
    let mut table: toml::Table = text
        .parse()
        .with_context(|| format!("cannot parse config {}", path.display()))
        .map_err(UsageError)?;
    match table.remove("estimator") {
        None => Ok(EstimatorSettings::default()),
        Some(v) => v
            .try_into()
            .map_err(|e: toml::de::Error| UsageError(anyhow!("estimator: {}", e.message())).into()),
    }
}

pub struct FuseArgs<'a> {
    pub obs: &'a [PathBuf],
    pub rct: &'a [String],
    pub catalog: &'a Path,
    pub features: &'a str,
    pub weights: &'a str,
    pub settings: EstimatorSettings,
}

fn input<T>(r: fusionlab_core::Result<T>) -> anyhow::Result<T> {
    r.map_err(|e| UsageError(e.into()).into())
}

pub fn run_fuse(args: &FuseArgs<'_>) -> anyhow::Result<FusionReport> {
    if args.obs.is_empty() {
        return Err(UsageError(anyhow!("at least one --obs file is required")).into());
    }
    let mut obs: Vec<ObservationalRound> = Vec::new();
    for p in args.obs {
        match input(load_round(p, Schema::Observational, None))? {
            RoundFile::Observational(r) => obs.push(r),
            RoundFile::Rct(_) => unreachable!("observational schema yields observational rounds"),
        }
    }
    let mut rct: Vec<RctRound> = Vec::new();
    for a in args.rct {
        let (path, sel) = parse_rct_arg(a)?;
        match input(load_round(&path, Schema::Rct, sel.as_ref()))? {
            RoundFile::Rct(r) => rct.push(r),
            RoundFile::Observational(_) => unreachable!("randomized schema yields randomized rounds"),
        }
    }
    let attrs = input(load_catalog_attributes(args.catalog))?;
    let catalog = input(InterventionCatalog::new(attrs, parse_features(args.features)?))?;
    let dr = observational_estimates(&obs, &args.settings)?;
    if catalog.n_interventions() != dr.tau.len() {
        return Err(UsageError(anyhow!(
            "catalog lists {} interventions, data has {}",
            catalog.n_interventions(),
            dr.tau.len()
        ))
        .into());
    }
    let state = combine(&dr, &rct)?;
    let weights = parse_weights(args.weights, dr.tau.len())?;
    let f = fuse(&state, &catalog, &weights)?;
    Ok(FusionReport::new(&state, &catalog, &weights, &f))
}

pub fn write_json(report: &FusionReport, out: &Path) -> anyhow::Result<()> {
    let mut s = serde_json::to_string_pretty(report)?;
    s.push('\n');
    atomic_write(out, s.as_bytes())?;
    Ok(())
}

pub fn read_report(path: &Path) -> anyhow::Result<FusionReport> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read report {}", path.display()))
        .map_err(UsageError)?;
    serde_json::from_str(&text)
        .with_context(|| format!("cannot parse report {}", path.display()))
        .map_err(|e| UsageError(e).into())
}

pub struct SelectArgs {
    pub method: Method,
    pub n: usize,
    pub l_next: usize,
    pub seed: u64,
    pub hyper: Hyperparams,
    pub without_replacement: bool,
}

/// Re-runs the fusion recorded in `report` and selects the next set. The log
/// row is numbered by the count of randomized rounds so far.
pub fn run_select(report: &FusionReport, a: &SelectArgs) -> anyhow::Result<(usize, SelectionDecision)> {
    let (state, catalog, weights) = report.inputs()?;
    let f = fuse(&state, &catalog, &weights)?;
    a.hyper.validate().map_err(|e| UsageError(e.into()))?;
    if a.n == 0 || a.n > state.n_interventions() {
        return Err(UsageError(anyhow!("--n must be in 1..={}", state.n_interventions())).into());
    }
    let ctx = DesignContext {
        state: &state,
        design: catalog.design(),
        fusion: &f,
        weights: &weights,
        quadratic: a.hyper.quadratic,
    };
    let d = select(
        a.method,
        &ctx,
        &a.hyper,
        a.n,
        a.l_next,
        a.seed,
        &state.ever_selected(),
        a.without_replacement,
    )?;
    Ok((state.selected_history().len(), d))
}

pub fn decision_csv(round: usize, d: &SelectionDecision) -> String {
    format!(
        "{}\n{}\n",
        SelectionDecision::log_header(d.scores.len()),
        d.log_row(round)
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rct_argument_forms() {
        let (p, s) = parse_rct_arg("data/rct_round_1.csv").unwrap();
        assert_eq!(p, PathBuf::from("data/rct_round_1.csv"));
        assert!(s.is_none());
        let (_, s) = parse_rct_arg("rct_round_2.csv@1,3").unwrap();
        assert_eq!(s.unwrap(), BTreeSet::from([0, 2]));
        assert!(parse_rct_arg("r.csv@0").is_err());
        assert!(parse_rct_arg("r.csv@").is_err());
    }

    #[test]
    fn feature_and_weight_specs() {
        assert_eq!(parse_features("linear").unwrap(), FeatureMap::Linear);
        assert_eq!(
            parse_features("spline:2:1").unwrap(),
            FeatureMap::Spline(SplineSpec::new(2, 1))
        );
        assert!(parse_features("cubic").is_err());
        assert_eq!(parse_weights("identity", 4).unwrap(), LossWeights::scaled_identity(4));
        assert!(parse_weights("1,2", 3).is_err());
        assert!(parse_weights("1,-2", 2).is_err());
    }
}
