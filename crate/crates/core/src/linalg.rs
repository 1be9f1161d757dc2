//! Small dense solves. Systems here are at most a few hundred unknowns.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Solves `a x = b` for symmetric positive definite `a` (row-major, `n x n`).
pub fn solve_spd(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    let n = b.len();
    debug_assert_eq!(a.len(), n * n);
    let m = DMatrix::from_row_slice(n, n, a);
    let rhs = DVector::from_column_slice(b);
    if let Some(chol) = m.clone().cholesky() {
        return Ok(chol.solve(&rhs).iter().copied().collect());
    }
    // Semi-definite within rounding: fall back to LU.
    m.lu()
        .solve(&rhs)
        .map(|x| x.iter().copied().collect())
        .ok_or_else(|| Error::Numerical("singular linear system".into()))
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
