//! Small dense helpers shared by the solvers.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Condition numbers above this are treated as singular.
pub(crate) const MAX_CONDITION: f64 = 1e12;

/// 2-norm condition number from the singular values.
pub(crate) fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().singular_values();
    let max = sv.max();
    let min = sv.min();
    if min <= 0.0 || !min.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Solve `m x = rhs` by LU after checking the condition number.
pub(crate) fn solve_checked(m: &DMatrix<f64>, rhs: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
    let cond = condition_number(m);
    if !(cond <= MAX_CONDITION) {
        return Err(Error::IllPosed {
            what: what.to_string(),
            detail: format!("condition number {cond:.3e} exceeds {MAX_CONDITION:.0e}"),
        });
    }
    m.clone().lu().solve(rhs).ok_or_else(|| Error::IllPosed {
        what: what.to_string(),
        detail: "LU factorization is singular".into(),
    })
}

/// Inverse with a single jitter retry; used for the per-block ADMM systems.
pub(crate) fn inverse_with_jitter(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    if let Some(inv) = m.clone().try_inverse() {
        if inv.iter().all(|v| v.is_finite()) {
            return Ok(inv);
        }
    }
    let n = m.nrows();
    let jittered = m + DMatrix::identity(n, n) * 1e-10;
    jittered
        .try_inverse()
        .filter(|inv| inv.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::IllPosed {
            what: what.to_string(),
            detail: "singular even after 1e-10 jitter".into(),
        })
}

/// Pairwise (cascade) summation; fixed association order regardless of thread count.
pub(crate) fn pairwise_sum<T, F>(items: &[T], zero: &T, add: &F) -> T
where
    T: Clone,
    F: Fn(&T, &T) -> T,
{
    match items.len() {
        0 => zero.clone(),
        1 => items[0].clone(),
        n => {
            let (lo, hi) = items.split_at(n / 2);
            add(&pairwise_sum(lo, zero, add), &pairwise_sum(hi, zero, add))
        }
    }
}

pub(crate) fn sym_part(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}
