//! Additive B-spline feature expansion with optional pairwise products.
//!
//! Each context coordinate gets a clamped B-spline basis whose interior knots
//! sit at empirical quantiles of the training data. Because B-splines form a
//! partition of unity, the first function of every coordinate is dropped and
//! a single intercept column is kept instead.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Basis specification, as it appears in configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplineSpec {
    #[serde(default = "default_degree")]
    pub degree: usize,
    #[serde(default = "default_knots")]
    pub knots_per_dim: usize,
    /// 1-based coordinate pairs whose raw product is appended as a column.
    #[serde(default)]
    pub interaction_pairs: Vec<(usize, usize)>,
}

fn default_degree() -> usize {
    3
}

fn default_knots() -> usize {
    3
}

impl Default for SplineSpec {
    fn default() -> Self {
        Self {
            degree: default_degree(),
            knots_per_dim: default_knots(),
            interaction_pairs: Vec::new(),
        }
    }
}

impl SplineSpec {
    pub fn new(degree: usize, knots_per_dim: usize) -> Self {
        Self {
            degree,
            knots_per_dim,
            interaction_pairs: Vec::new(),
        }
    }

    pub fn with_interactions(mut self, pairs: Vec<(usize, usize)>) -> Self {
        self.interaction_pairs = pairs;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
struct CoordinateBasis {
    lo: f64,
    hi: f64,
    /// Full clamped knot vector.
    knots: Vec<f64>,
    n_funcs: usize,
}

/// A basis fitted to training contexts (knot placement frozen).
#[derive(Debug, Clone, PartialEq)]
pub struct SplineBasis {
    degree: usize,
    input_dim: usize,
    /// `None` for coordinates that were constant in the training data.
    coords: Vec<Option<CoordinateBasis>>,
    pairs: Vec<(usize, usize)>,
    n_columns: usize,
}

impl SplineBasis {
    /// Places knots using the rows of `x` (one context per row).
    pub fn fit(x: &DMatrix<f64>, spec: &SplineSpec) -> Result<Self> {
        if spec.degree == 0 {
            return Err(Error::Domain("spline degree must be at least 1".into()));
        }
        if x.nrows() == 0 {
            return Err(Error::Domain("cannot place knots on zero rows".into()));
        }
        let input_dim = x.ncols();
        let mut pairs = Vec::with_capacity(spec.interaction_pairs.len());
        for &(a, b) in &spec.interaction_pairs {
            if a == 0 || b == 0 || a > input_dim || b > input_dim {
                return Err(Error::Domain(format!(
                    "interaction pair ({a}, {b}) outside coordinates 1..={input_dim}"
                )));
            }
            pairs.push((a - 1, b - 1));
        }

        let mut coords = Vec::with_capacity(input_dim);
        let mut n_columns = 1;
        for d in 0..input_dim {
            let mut col: Vec<f64> = x.column(d).iter().copied().collect();
            if col.iter().any(|v| !v.is_finite()) {
                return Err(Error::Domain(format!("non-finite value in coordinate {}", d + 1)));
            }
            col.sort_by(f64::total_cmp);
            let lo = col[0];
            let hi = col[col.len() - 1];
            if hi - lo <= f64::EPSILON * lo.abs().max(hi.abs()).max(1.0) {
                coords.push(None);
                continue;
            }
            let mut interior: Vec<f64> = (1..=spec.knots_per_dim)
                .map(|k| quantile_sorted(&col, k as f64 / (spec.knots_per_dim + 1) as f64))
                .filter(|&t| t > lo && t < hi)
                .collect();
            interior.dedup();
            let mut knots = vec![lo; spec.degree + 1];
            knots.extend_from_slice(&interior);
            knots.extend(std::iter::repeat_n(hi, spec.degree + 1));
            let n_funcs = knots.len() - spec.degree - 1;
            n_columns += n_funcs - 1;
            coords.push(Some(CoordinateBasis {
                lo,
                hi,
                knots,
                n_funcs,
            }));
        }
        n_columns += pairs.len();
        Ok(Self {
            degree: spec.degree,
            input_dim,
            coords,
            pairs,
            n_columns,
        })
    }

    pub fn n_columns(&self) -> usize {
        self.n_columns
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    /// Evaluates the basis for one context. Coordinates outside the training
    /// range are clamped to it.
    pub fn row(&self, x: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_columns);
        out.push(1.0);
        let mut scratch = vec![0.0; self.degree + 1];
        for (d, coord) in self.coords.iter().enumerate() {
            let Some(c) = coord else { continue };
            let start = out.len();
            out.extend(std::iter::repeat_n(0.0, c.n_funcs - 1));
            let v = x[d].clamp(c.lo, c.hi);
            let span = find_span(&c.knots, self.degree, c.n_funcs, v);
            basis_funcs(&c.knots, self.degree, span, v, &mut scratch);
            for (r, &b) in scratch.iter().enumerate() {
                let f = span - self.degree + r;
                if f > 0 {
                    out[start + f - 1] = b;
                }
            }
        }
        for &(a, b) in &self.pairs {
            out.push(x[a] * x[b]);
        }
        out
    }

    /// Design matrix with one row per row of `x`.
    pub fn design(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.input_dim {
            return Err(Error::Dimension {
                what: "context columns",
                expected: self.input_dim,
                found: x.ncols(),
            });
        }
        let mut out = DMatrix::zeros(x.nrows(), self.n_columns);
        let mut buf = vec![0.0; self.input_dim];
        for i in 0..x.nrows() {
            for (d, b) in buf.iter_mut().enumerate() {
                *b = x[(i, d)];
            }
            for (k, v) in self.row(&buf).into_iter().enumerate() {
                out[(i, k)] = v;
            }
        }
        Ok(out)
    }
}

/// Linear-interpolation quantile of sorted data (type 7).
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 < sorted.len() {
        sorted[i] + frac * (sorted[i + 1] - sorted[i])
    } else {
        sorted[i]
    }
}

fn find_span(knots: &[f64], degree: usize, n_funcs: usize, x: f64) -> usize {
    if x >= knots[n_funcs] {
        return n_funcs - 1;
    }
    let (mut low, mut high) = (degree, n_funcs);
    let mut mid = (low + high) / 2;
    while x < knots[mid] || x >= knots[mid + 1] {
        if x < knots[mid] {
            high = mid;
        } else {
            low = mid;
        }
        mid = (low + high) / 2;
    }
    mid
}

/// Nonzero basis values `N_{span-degree..=span}(x)` by the Cox-de Boor recurrence.
fn basis_funcs(knots: &[f64], degree: usize, span: usize, x: f64, out: &mut [f64]) {
    let mut left = vec![0.0; degree + 1];
    let mut right = vec![0.0; degree + 1];
    out[0] = 1.0;
    for j in 1..=degree {
        left[j] = x - knots[span + 1 - j];
        right[j] = knots[span + j] - x;
        let mut saved = 0.0;
        for r in 0..j {
            let denom = right[r + 1] + left[j - r];
            let temp = if denom != 0.0 { out[r] / denom } else { 0.0 };
            out[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        out[j] = saved;
    }
}
