//! Small dense solves for normal equations.

use nalgebra::{DMatrix, DVector};

/// Relative singular-value floor below which a Gram matrix is treated as
/// rank deficient.
pub const RANK_TOL: f64 = 1e-10;

/// Solves `a x = b` for a symmetric positive semi-definite `a`, returning
/// `None` when `a` is numerically singular.
pub fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let svd = a.clone().svd(true, true);
    let max = svd.singular_values.max();
    let min = svd.singular_values.min();
    if !(max > 0.0) || min <= RANK_TOL * max {
        return None;
    }
    svd.solve(b, 0.0).ok()
}
