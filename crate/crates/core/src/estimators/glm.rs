//! Logistic regression by damped Newton iterations and ordinary least squares.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{cholesky_inverse, cholesky_solve, gram_cholesky};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonOptions {
    /// Convergence threshold on the Euclidean norm of the mean score.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 100,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LogisticFit {
    pub coef: DVector<f64>,
    /// Sandwich covariance `A^-1 B A^-1` of the coefficients.
    pub cov: DMatrix<f64>,
    pub iterations: usize,
    pub grad_norm: f64,
}

impl LogisticFit {
    pub fn std_errors(&self) -> DVector<f64> {
        self.cov.diagonal().map(f64::sqrt)
    }
}

pub(crate) fn expit(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(t))` without overflow.
fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

fn log_likelihood(eta: &DVector<f64>, a: &[f64]) -> f64 {
    eta.iter().zip(a).map(|(&e, &y)| y * e - softplus(e)).sum()
}

/// Rows of `x` scaled by `w`, then `X^T diag(w) X` as `Xs^T X`.
fn weighted_gram(x: &DMatrix<f64>, w: &[f64]) -> DMatrix<f64> {
    let mut xs = x.clone();
    for (i, &wi) in w.iter().enumerate() {
        xs.row_mut(i).scale_mut(wi);
    }
    xs.tr_mul(x)
}

/// Maximizes the Bernoulli log-likelihood of `a` (0/1 valued) on design `x`.
pub fn fit_logistic(x: &DMatrix<f64>, a: &[f64], opts: NewtonOptions) -> Result<LogisticFit> {
    let (n, p) = x.shape();
    if a.len() != n {
        return Err(Error::Dimension {
            what: "logistic response length",
            expected: n,
            found: a.len(),
        });
    }
    if n <= p {
        return Err(Error::Fit {
            j: None,
            msg: format!("{n} records for {p} coefficients"),
        });
    }
    let ones = a.iter().filter(|&&v| v == 1.0).count();
    if ones == 0 || ones == n {
        return Err(Error::Fit {
            j: None,
            msg: "degenerate arm: every status is identical".into(),
        });
    }
    let av = DVector::from_column_slice(a);
    let mut beta = DVector::zeros(p);
    let mut eta = DVector::zeros(n);
    let mut ll = log_likelihood(&eta, a);
    let mut grad_norm = f64::INFINITY;

    for iter in 0..=opts.max_iter {
        let prob = eta.map(expit);
        let grad = x.tr_mul(&(&av - &prob));
        grad_norm = grad.norm() / n as f64;
        if grad_norm < opts.tol {
            if av.iter().zip(prob.iter()).all(|(y, q)| (y - q).abs() < 1e-6) {
                return Err(Error::Fit {
                    j: None,
                    msg: "complete separation: every fitted probability equals its status".into(),
                });
            }
            let w: Vec<f64> = prob.iter().map(|&q| q * (1.0 - q)).collect();
            let info = weighted_gram(x, &w);
            let l = gram_cholesky(&info)?;
            let info_inv = cholesky_inverse(&l);
            let r2: Vec<f64> = av.iter().zip(prob.iter()).map(|(y, q)| (y - q) * (y - q)).collect();
            let meat = weighted_gram(x, &r2);
            let cov = &info_inv * meat * &info_inv;
            return Ok(LogisticFit {
                coef: beta,
                cov,
                iterations: iter,
                grad_norm,
            });
        }
        if iter == opts.max_iter {
            break;
        }
        let w: Vec<f64> = prob.iter().map(|&q| (q * (1.0 - q)).max(1e-12)).collect();
        let l = gram_cholesky(&weighted_gram(x, &w)).map_err(|e| Error::Fit {
            j: None,
            msg: format!("singular information matrix ({e})"),
        })?;
        let step = cholesky_solve(&l, &grad);
        let mut t = 1.0;
        loop {
            let cand = &beta + &step * t;
            let cand_eta = x * &cand;
            let cand_ll = log_likelihood(&cand_eta, a);
            if cand_ll >= ll - 1e-12 * ll.abs() || t < 1e-10 {
                beta = cand;
                eta = cand_eta;
                ll = cand_ll;
                break;
            }
            t *= 0.5;
        }
        if beta.amax() > 1e6 {
            return Err(Error::Fit {
                j: None,
                msg: format!("coefficients diverging (max |beta| = {:.3e}); likely separation", beta.amax()),
            });
        }
    }
    Err(Error::Fit {
        j: None,
        msg: format!(
            "no convergence after {} iterations (mean score norm {grad_norm:.3e})",
            opts.max_iter
        ),
    })
}

#[derive(Debug, Clone)]
pub struct LeastSquaresFit {
    pub coef: DVector<f64>,
    pub std_errors: DVector<f64>,
    pub residual_var: f64,
}

/// Ordinary least squares through the normal equations; collinear columns
/// are reported by index.
pub fn fit_least_squares(x: &DMatrix<f64>, y: &[f64]) -> Result<LeastSquaresFit> {
    let (n, p) = x.shape();
    if y.len() != n {
        return Err(Error::Dimension {
            what: "regression response length",
            expected: n,
            found: y.len(),
        });
    }
    if n < p {
        return Err(Error::Fit {
            j: None,
            msg: format!("{n} records for {p} coefficients"),
        });
    }
    let yv = DVector::from_column_slice(y);
    let l = gram_cholesky(&x.tr_mul(x))?;
    let coef = cholesky_solve(&l, &x.tr_mul(&yv));
    let resid = &yv - x * &coef;
    let dof = (n - p).max(1) as f64;
    let residual_var = resid.norm_squared() / dof;
    let std_errors = cholesky_inverse(&l).diagonal().map(|v| (v * residual_var).sqrt());
    Ok(LeastSquaresFit {
        coef,
        std_errors,
        residual_var,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn logistic_null_model_recovers_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 5000;
        let x = DMatrix::from_fn(n, 3, |_, c| if c == 0 { 1.0 } else { rng.sample(StandardNormal) });
        let a: Vec<f64> = (0..n).map(|_| if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 }).collect();
        let fit = fit_logistic(&x, &a, NewtonOptions::default()).unwrap();
        for &b in fit.coef.iter() {
            assert!(b.abs() < 0.1, "{b}");
        }
    }

    #[test]
    fn logistic_recovers_known_coefficients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 20000;
        let truth = [-0.4, 0.8, -1.2];
        let x = DMatrix::from_fn(n, 3, |_, c| if c == 0 { 1.0 } else { rng.sample(StandardNormal) });
        let a: Vec<f64> = (0..n)
            .map(|i| {
                let eta: f64 = (0..3).map(|c| x[(i, c)] * truth[c]).sum();
                if rng.random::<f64>() < expit(eta) { 1.0 } else { 0.0 }
            })
            .collect();
        let fit = fit_logistic(&x, &a, NewtonOptions::default()).unwrap();
        let se = fit.std_errors();
        for c in 0..3 {
            assert!((fit.coef[c] - truth[c]).abs() < 3.0 * se[c], "coef {c}: {} vs {}", fit.coef[c], truth[c]);
        }
        assert!(fit.grad_norm < 1e-8);
    }

    #[test]
    fn logistic_degenerate_and_separated() {
        let x = DMatrix::from_fn(20, 2, |i, c| if c == 0 { 1.0 } else { i as f64 });
        assert!(fit_logistic(&x, &[1.0; 20], NewtonOptions::default()).is_err());
        let sep: Vec<f64> = (0..20).map(|i| if i < 10 { 0.0 } else { 1.0 }).collect();
        assert!(matches!(
            fit_logistic(&x, &sep, NewtonOptions::default()),
            Err(Error::Fit { .. })
        ));
    }

    #[test]
    fn least_squares_exact_linear() {
        let x = DMatrix::from_fn(10, 2, |i, c| if c == 0 { 1.0 } else { i as f64 * 0.3 });
        let y: Vec<f64> = (0..10).map(|i| 2.0 * i as f64 * 0.3).collect();
        let fit = fit_least_squares(&x, &y).unwrap();
        assert_relative_eq!(fit.coef[0], 0.0, epsilon = 1e-10);
        assert_relative_eq!(fit.coef[1], 2.0, epsilon = 1e-10);
    }

    #[test]
    fn least_squares_noisy_within_three_se() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 10000;
        let x = DMatrix::from_fn(n, 2, |_, c| if c == 0 { 1.0 } else { rng.sample(StandardNormal) });
        let y: Vec<f64> = (0..n)
            .map(|i| 1.5 - 0.7 * x[(i, 1)] + rng.sample::<f64, _>(StandardNormal))
            .collect();
        let fit = fit_least_squares(&x, &y).unwrap();
        assert!((fit.coef[0] - 1.5).abs() < 3.0 * fit.std_errors[0]);
        assert!((fit.coef[1] + 0.7).abs() < 3.0 * fit.std_errors[1]);
    }

    #[test]
    fn least_squares_names_collinear_columns() {
        let x = DMatrix::from_fn(8, 3, |i, c| match c {
            0 => 1.0,
            1 => i as f64,
            _ => 2.0 * i as f64 + 1.0,
        });
        let y = vec![0.0; 8];
        match fit_least_squares(&x, &y) {
            Err(Error::RankDeficient { columns }) => assert_eq!(columns, vec![2]),
            other => panic!("{other:?}"),
        }
    }
}
