//! Small dense solves on top of nalgebra, with an explicit conditioning
//! check in front of every factorization.

use nalgebra::{DMatrix, DVector};

/// Reciprocal 2-norm condition number, `sigma_min / sigma_max`.
pub fn rcond(m: &DMatrix<f64>) -> f64 {
    if m.iter().any(|v| !v.is_finite()) {
        return 0.0;
    }
    let sv = m.clone().singular_values();
    let max = sv.max();
    if max <= 0.0 {
        return 0.0;
    }
    sv.min() / max
}

/// LU solve; `None` if the factorization is singular.
pub fn lu_solve(m: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    m.clone().lu().solve(b).filter(|x| x.iter().all(|v| v.is_finite()))
}

/// Solve with a condition gate: below `min_rcond`, retry once on
/// `m + ridge * I`. Returns the solution and the ridge actually used, or
/// the offending reciprocal condition.
pub fn guarded_solve(
    m: &DMatrix<f64>,
    b: &DVector<f64>,
    min_rcond: f64,
    ridge: f64,
) -> Result<(DVector<f64>, f64), f64> {
    let rc = rcond(m);
    if rc >= min_rcond {
        return lu_solve(m, b).map(|x| (x, 0.0)).ok_or(rc);
    }
    if ridge <= 0.0 {
        return Err(rc);
    }
    let shifted = m + DMatrix::identity(m.nrows(), m.ncols()) * ridge;
    let rc2 = rcond(&shifted);
    if rc2 < min_rcond {
        return Err(rc2);
    }
    lu_solve(&shifted, b).map(|x| (x, ridge)).ok_or(rc2)
}

/// Default ridge: `1e-10 * trace / n`, floored so it is never zero.
pub fn default_ridge(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows().max(1) as f64;
    (1e-10 * m.trace().abs() / n).max(1e-300)
}
