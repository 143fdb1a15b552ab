//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative pivot threshold below which a Gram-matrix column is treated as
/// linearly dependent on the columns before it.
const PIVOT_RTOL: f64 = 1e-10;

/// Lower Cholesky factor of a symmetric positive semi-definite Gram matrix,
/// with dependent columns identified by name instead of a bare failure.
///
/// Column `k` is flagged when its Schur-complement pivot falls below
/// `PIVOT_RTOL * gram[(k, k)]`, i.e. when it lies (numerically) in the span of
/// the earlier columns. All flagged columns are reported together.
pub fn gram_cholesky(gram: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = gram.nrows();
    if gram.ncols() != n {
        return Err(Error::Dimension {
            what: "gram matrix columns",
            expected: n,
            found: gram.ncols(),
        });
    }
    let mut l = DMatrix::<f64>::zeros(n, n);
    let mut dependent = Vec::new();
    for k in 0..n {
        let mut d = gram[(k, k)];
        for p in 0..k {
            d -= l[(k, p)] * l[(k, p)];
        }
        let scale = gram[(k, k)].abs().max(f64::MIN_POSITIVE);
        if !(d > PIVOT_RTOL * scale) {
            dependent.push(k);
            continue;
        }
        let pivot = d.sqrt();
        l[(k, k)] = pivot;
        for i in (k + 1)..n {
            let mut s = gram[(i, k)];
            for p in 0..k {
                s -= l[(i, p)] * l[(k, p)];
            }
            l[(i, k)] = s / pivot;
        }
    }
    if dependent.is_empty() {
        Ok(l)
    } else {
        Err(Error::RankDeficient { columns: dependent })
    }
}

/// Solves `L L^T x = b` given the lower factor.
pub fn cholesky_solve(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let y = l
        .solve_lower_triangular(b)
        .expect("cholesky factor has a nonzero diagonal");
    l.transpose()
        .solve_upper_triangular(&y)
        .expect("cholesky factor has a nonzero diagonal")
}

/// Inverse of `L L^T` given the lower factor.
pub fn cholesky_inverse(l: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let linv = l
        .solve_lower_triangular(&DMatrix::identity(n, n))
        .expect("cholesky factor has a nonzero diagonal");
    linv.transpose() * linv
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    m.is_square()
        && (0..m.nrows()).all(|i| (0..i).all(|j| (m[(i, j)] - m[(j, i)]).abs() <= tol))
}

/// `tr(A B)` without forming the product.
pub fn trace_of_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    debug_assert_eq!(a.ncols(), b.nrows());
    debug_assert_eq!(a.nrows(), b.ncols());
    let mut t = 0.0;
    for i in 0..a.nrows() {
        for k in 0..a.ncols() {
            t += a[(i, k)] * b[(k, i)];
        }
    }
    t
}

pub fn quadratic_form(m: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    v.dot(&(m * v))
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn gram_cholesky_reconstructs() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.5, 1.0, -1.0, 1.0, 2.0, 1.0, 0.0]);
        let g = x.transpose() * &x;
        let l = gram_cholesky(&g).unwrap();
        assert_relative_eq!(&l * l.transpose(), g, epsilon = 1e-12);
    }

    #[test]
    fn gram_cholesky_names_collinear_columns() {
        // Column 2 = column 0 + column 1; column 3 duplicates column 0.
        let x = DMatrix::from_row_slice(
            4,
            4,
            &[
                1.0, 0.0, 1.0, 1.0, //
                1.0, 1.0, 2.0, 1.0, //
                1.0, 2.0, 3.0, 1.0, //
                1.0, 5.0, 6.0, 1.0,
            ],
        );
        let g = x.transpose() * &x;
        match gram_cholesky(&g) {
            Err(Error::RankDeficient { columns }) => assert_eq!(columns, vec![2, 3]),
            other => panic!("expected rank deficiency, got {other:?}"),
        }
    }

    #[test]
    fn trace_of_product_matches_explicit() {
        let a = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = DMatrix::from_row_slice(3, 2, &[0.5, -1.0, 2.0, 0.0, 1.0, 3.0]);
        assert_relative_eq!(trace_of_product(&a, &b), (&a * &b).trace(), epsilon = 1e-12);
    }
}
