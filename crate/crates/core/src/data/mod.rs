//! Domain records, round containers, the intervention catalog and the
//! weighted loss shared by every other module.
//!
//! Intervention indices are 0-based in memory and 1-based in files and
//! user-facing messages.

mod io;

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::basis::{SplineBasis, SplineSpec};
use crate::error::{Error, Result};
use crate::linalg;

pub use io::{load_catalog_attributes, load_round, save_catalog, save_round, RoundFile, Schema};

/// One unit: context `x`, intervention statuses `a` and outcome `y`.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitRecord {
    x: Vec<f64>,
    a: Vec<u8>,
    y: f64,
}

impl UnitRecord {
    pub fn new(x: Vec<f64>, a: Vec<u8>, y: f64) -> Result<Self> {
        if let Some(pos) = a.iter().position(|&v| v > 1) {
            return Err(Error::Validation(format!(
                "a_{} = {} is not binary",
                pos + 1,
                a[pos]
            )));
        }
        Ok(Self { x, a, y })
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn a(&self) -> &[u8] {
        &self.a
    }

    pub fn y(&self) -> f64 {
        self.y
    }

    pub fn treated(&self, j: usize) -> bool {
        self.a[j] == 1
    }
}

/// A randomized-study record; `w` is the (0-based) randomized intervention.
#[derive(Debug, Clone, PartialEq)]
pub struct RctRecord {
    pub base: UnitRecord,
    pub w: usize,
}

fn check_shapes<'a>(mut records: impl Iterator<Item = &'a UnitRecord>) -> Result<(usize, usize)> {
    let first = records
        .next()
        .ok_or_else(|| Error::Validation("round has no records".into()))?;
    let (px, j) = (first.x.len(), first.a.len());
    for (i, r) in records.enumerate() {
        if r.x.len() != px {
            return Err(Error::Validation(format!(
                "record {} has {} context values, expected {px}",
                i + 2,
                r.x.len()
            )));
        }
        if r.a.len() != j {
            return Err(Error::Validation(format!(
                "record {} has {} intervention statuses, expected {j}",
                i + 2,
                r.a.len()
            )));
        }
    }
    Ok((px, j))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationalRound {
    round: usize,
    records: Vec<UnitRecord>,
    dims: (usize, usize),
}

impl ObservationalRound {
    pub fn new(round: usize, records: Vec<UnitRecord>) -> Result<Self> {
        if round == 0 {
            return Err(Error::Validation("round index must be positive".into()));
        }
        let dims = check_shapes(records.iter())?;
        Ok(Self {
            round,
            records,
            dims,
        })
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn records(&self) -> &[UnitRecord] {
        &self.records
    }

    pub fn context_dim(&self) -> usize {
        self.dims.0
    }

    pub fn n_interventions(&self) -> usize {
        self.dims.1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RctRound {
    round: usize,
    selected: BTreeSet<usize>,
    records: Vec<RctRecord>,
    dims: (usize, usize),
}

impl RctRound {
    pub fn new(round: usize, selected: BTreeSet<usize>, records: Vec<RctRecord>) -> Result<Self> {
        if round == 0 {
            return Err(Error::Validation("round index must be positive".into()));
        }
        if selected.is_empty() {
            return Err(Error::Validation("selected set is empty".into()));
        }
        let dims = check_shapes(records.iter().map(|r| &r.base))?;
        if let Some(&max) = selected.iter().next_back() {
            if max >= dims.1 {
                return Err(Error::Validation(format!(
                    "selected intervention {} exceeds J = {}",
                    max + 1,
                    dims.1
                )));
            }
        }
        if let Some((i, r)) = records.iter().enumerate().find(|(_, r)| !selected.contains(&r.w)) {
            return Err(Error::Validation(format!(
                "record {}: randomized intervention w = {} is not in the selected set",
                i + 1,
                r.w + 1
            )));
        }
        Ok(Self {
            round,
            selected,
            records,
            dims,
        })
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn selected(&self) -> &BTreeSet<usize> {
        &self.selected
    }

    pub fn records(&self) -> &[RctRecord] {
        &self.records
    }

    pub fn context_dim(&self) -> usize {
        self.dims.0
    }

    pub fn n_interventions(&self) -> usize {
        self.dims.1
    }
}

/// Feature map `psi` from intervention attributes to bias-model regressors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureMap {
    /// `psi(v) = v`; attributes are used as features verbatim.
    Identity,
    /// `psi(v) = 1`.
    Intercept,
    /// `psi(v) = (1, v)`.
    Linear,
    /// Additive B-spline expansion of the attributes (includes an intercept).
    Spline(SplineSpec),
}

/// Per-intervention attributes and the design matrix `Psi` (J x p_v, row j = psi(V^j)).
#[derive(Debug, Clone)]
pub struct InterventionCatalog {
    attributes: Vec<Vec<f64>>,
    feature_map: FeatureMap,
    basis: Option<SplineBasis>,
    design: DMatrix<f64>,
}

impl InterventionCatalog {
    pub fn new(attributes: Vec<Vec<f64>>, feature_map: FeatureMap) -> Result<Self> {
        let j = attributes.len();
        if j == 0 {
            return Err(Error::Validation("catalog has no interventions".into()));
        }
        let p_attr = attributes[0].len();
        if let Some(bad) = attributes.iter().position(|v| v.len() != p_attr) {
            return Err(Error::Validation(format!(
                "intervention {} has {} attributes, expected {p_attr}",
                bad + 1,
                attributes[bad].len()
            )));
        }
        let basis = match &feature_map {
            FeatureMap::Spline(spec) => {
                let v = DMatrix::from_fn(j, p_attr, |r, c| attributes[r][c]);
                Some(SplineBasis::fit(&v, spec)?)
            }
            _ => None,
        };
        let mut catalog = Self {
            attributes,
            feature_map,
            basis,
            design: DMatrix::zeros(0, 0),
        };
        let rows: Vec<Vec<f64>> = catalog.attributes.iter().map(|v| catalog.feature_row(v)).collect();
        let pv = rows[0].len();
        catalog.design = DMatrix::from_fn(j, pv, |r, c| rows[r][c]);
        Ok(catalog)
    }

    /// `psi(v)` for an arbitrary attribute vector.
    pub fn feature_row(&self, v: &[f64]) -> Vec<f64> {
        match &self.feature_map {
            FeatureMap::Identity => v.to_vec(),
            FeatureMap::Intercept => vec![1.0],
            FeatureMap::Linear => std::iter::once(1.0).chain(v.iter().copied()).collect(),
            FeatureMap::Spline(_) => self.basis.as_ref().expect("spline basis fitted").row(v),
        }
    }

    pub fn n_interventions(&self) -> usize {
        self.attributes.len()
    }

    pub fn n_features(&self) -> usize {
        self.design.ncols()
    }

    pub fn attributes(&self) -> &[Vec<f64>] {
        &self.attributes
    }

    pub fn feature_map(&self) -> &FeatureMap {
        &self.feature_map
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }

    /// Catalog whose attribute rows are already the bias-model features.
    pub fn from_design(design: &DMatrix<f64>) -> Result<Self> {
        let attributes = design.row_iter().map(|r| r.iter().copied().collect()).collect();
        Self::new(attributes, FeatureMap::Identity)
    }
}

/// Symmetric positive-definite loss weights `D`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights(DMatrix<f64>);

impl LossWeights {
    pub fn new(d: DMatrix<f64>) -> Result<Self> {
        if !d.is_square() {
            return Err(Error::Validation("loss weights must be square".into()));
        }
        if !linalg::is_symmetric(&d, 1e-10) {
            return Err(Error::Validation("loss weights are not symmetric".into()));
        }
        let eig = SymmetricEigen::new(d.clone());
        if eig.eigenvalues.iter().any(|&e| !(e > 0.0)) {
            return Err(Error::Validation("loss weights are not positive definite".into()));
        }
        Ok(Self(d))
    }

    /// `I / J`, the normalized squared-error loss.
    pub fn scaled_identity(j: usize) -> Self {
        Self(DMatrix::identity(j, j) / j as f64)
    }

    pub fn diagonal(weights: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(&DVector::from_column_slice(weights)))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }
}

/// `(tau_hat - tau_star)^T D (tau_hat - tau_star)`.
pub fn weighted_loss(tau_hat: &[f64], tau_star: &[f64], d: &LossWeights) -> Result<f64> {
    let j = d.dim();
    for (what, len) in [("estimate length", tau_hat.len()), ("target length", tau_star.len())] {
        if len != j {
            return Err(Error::Dimension {
                what,
                expected: j,
                found: len,
            });
        }
    }
    let delta = DVector::from_iterator(j, tau_hat.iter().zip(tau_star).map(|(a, b)| a - b));
    Ok(linalg::quadratic_form(d.matrix(), &delta).max(0.0))
}

/// Per-round estimates pooled over rounds `1..=m`.
///
/// `tau_rct[j]` and `upsilon_hat[j]` are `None` until intervention `j` has
/// randomized data; `r_counts[j]` counts randomized records with `w == j`.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateState {
    tau_obs: Vec<f64>,
    tau_rct: Vec<Option<f64>>,
    gamma_hat: DMatrix<f64>,
    upsilon_hat: Vec<Option<f64>>,
    r_counts: Vec<usize>,
    selected_history: Vec<BTreeSet<usize>>,
}

impl EstimateState {
    pub fn new(
        tau_obs: Vec<f64>,
        tau_rct: Vec<Option<f64>>,
        gamma_hat: DMatrix<f64>,
        upsilon_hat: Vec<Option<f64>>,
        r_counts: Vec<usize>,
        selected_history: Vec<BTreeSet<usize>>,
    ) -> Result<Self> {
        let j = tau_obs.len();
        for (what, len) in [
            ("tau_rct length", tau_rct.len()),
            ("upsilon_hat length", upsilon_hat.len()),
            ("r_counts length", r_counts.len()),
            ("gamma_hat rows", gamma_hat.nrows()),
            ("gamma_hat columns", gamma_hat.ncols()),
        ] {
            if len != j {
                return Err(Error::Dimension {
                    what,
                    expected: j,
                    found: len,
                });
            }
        }
        let ever: BTreeSet<usize> = selected_history.iter().flatten().copied().collect();
        for k in 0..j {
            let defined = tau_rct[k].is_some();
            if defined != (r_counts[k] > 0) || defined != upsilon_hat[k].is_some() {
                return Err(Error::Validation(format!(
                    "intervention {}: RCT estimate, variance and record count disagree on availability",
                    k + 1
                )));
            }
            if defined && !ever.contains(&k) {
                return Err(Error::Validation(format!(
                    "intervention {} has randomized data but was never selected",
                    k + 1
                )));
            }
            if let Some(u) = upsilon_hat[k] {
                if !(u > 0.0) {
                    return Err(Error::Validation(format!(
                        "intervention {}: RCT variance {u} is not positive",
                        k + 1
                    )));
                }
            }
        }
        if !linalg::is_symmetric(&gamma_hat, 1e-10 * linalg::max_abs(&gamma_hat).max(1.0)) {
            return Err(Error::Validation("gamma_hat is not symmetric".into()));
        }
        Ok(Self {
            tau_obs,
            tau_rct,
            gamma_hat,
            upsilon_hat,
            r_counts,
            selected_history,
        })
    }

    pub fn n_interventions(&self) -> usize {
        self.tau_obs.len()
    }

    pub fn tau_obs(&self) -> &[f64] {
        &self.tau_obs
    }

    pub fn tau_rct(&self) -> &[Option<f64>] {
        &self.tau_rct
    }

    pub fn gamma_hat(&self) -> &DMatrix<f64> {
        &self.gamma_hat
    }

    pub fn upsilon_hat(&self) -> &[Option<f64>] {
        &self.upsilon_hat
    }

    pub fn r_counts(&self) -> &[usize] {
        &self.r_counts
    }

    pub fn selected_history(&self) -> &[BTreeSet<usize>] {
        &self.selected_history
    }

    /// Interventions with an RCT estimate (the union of selected sets that produced data).
    pub fn randomized(&self) -> Vec<usize> {
        (0..self.n_interventions()).filter(|&k| self.tau_rct[k].is_some()).collect()
    }

    pub fn ever_selected(&self) -> BTreeSet<usize> {
        self.selected_history.iter().flatten().copied().collect()
    }
}
