//! Small dense helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

/// Relative singular-value cutoff for pseudo-inverse solves.
pub const PINV_RCOND: f64 = 1e-12;

pub fn one_hot(len: usize, index: usize) -> DVector<f64> {
    let mut v = DVector::zeros(len);
    v[index] = 1.0;
    v
}

/// Largest entry with lowest-index tie-breaking.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Argmax {
    pub index: usize,
    /// More than one entry attains the maximum.
    pub tied: bool,
}

pub fn argmax(values: &[f64]) -> Argmax {
    let mut index = 0;
    let mut best = f64::NEG_INFINITY;
    let mut tied = false;
    for (i, &v) in values.iter().enumerate() {
        if v > best {
            best = v;
            index = i;
            tied = false;
        } else if v == best {
            tied = true;
        }
    }
    Argmax { index, tied }
}

/// Solves `a · x = b` for symmetric positive definite `a`; `None` if the
/// Cholesky factorization fails.
pub fn solve_spd(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    a.clone().cholesky().map(|c| c.solve(b))
}

/// Minimum-norm least-squares solution of `a · x = b` and the numerical rank of `a`.
pub fn lstsq_min_norm(a: &DMatrix<f64>, b: &DMatrix<f64>) -> (DMatrix<f64>, usize) {
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let eps = if smax > 0.0 { smax * PINV_RCOND * a.nrows().max(a.ncols()) as f64 } else { 0.0 };
    let rank = svd.rank(eps.max(f64::MIN_POSITIVE));
    let x = svd
        .solve(b, eps.max(f64::MIN_POSITIVE))
        .expect("svd computed with both factors");
    (x, rank)
}

/// 2-norm condition number of a symmetric matrix; infinite if not positive definite.
pub fn spd_condition(a: &DMatrix<f64>) -> f64 {
    let eig = a.clone().symmetric_eigen();
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if min <= 0.0 || !min.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Zero-pads `m` on the right to `cols` columns.
pub fn pad_columns(m: &DMatrix<f64>, cols: usize) -> DMatrix<f64> {
    if m.ncols() == cols {
        return m.clone();
    }
    let mut out = DMatrix::zeros(m.nrows(), cols);
    out.columns_mut(0, m.ncols()).copy_from(m);
    out
}
