use nalgebra::{DMatrix, DVector};

use crate::data::Design;
use crate::error::{Error, Result};

/// Eigenvalue ratio below which a symmetric matrix is called singular.
const RCOND: f64 = 1e-13;

/// Solves `a x = b` for symmetric positive definite `a`.
pub(crate) fn solve_spd(a: &DMatrix<f64>, b: &[f64], label: &str) -> Result<Vec<f64>> {
    let eig = a.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(max > 0.0) || min <= RCOND * max || !min.is_finite() {
        return Err(Error::Singular {
            label: label.to_string(),
            detail: format!("eigenvalues in [{min:.3e}, {max:.3e}]"),
        });
    }
    let rhs = eig.eigenvectors.transpose() * DVector::from_column_slice(b);
    let scaled = rhs.component_div(&eig.eigenvalues);
    Ok((eig.eigenvectors * scaled).as_slice().to_vec())
}

/// Solves a general square system by LU.
pub(crate) fn solve_square(a: &DMatrix<f64>, b: &[f64]) -> Option<Vec<f64>> {
    let lu = a.clone().lu();
    let x = lu.solve(&DVector::from_column_slice(b))?;
    if x.iter().all(|v| v.is_finite()) {
        Some(x.as_slice().to_vec())
    } else {
        None
    }
}

/// Weighted least squares of `y` on the design rows restricted to `keep`.
/// `ridge` is added to the diagonal of the normal equations.
pub(crate) fn weighted_least_squares(
    design: &Design,
    y: &[f64],
    w: &[f64],
    keep: impl Fn(usize) -> bool,
    ridge: f64,
    label: &str,
) -> Result<Vec<f64>> {
    let k = design.k();
    let mut xtx = DMatrix::<f64>::zeros(k, k);
    let mut xty = vec![0.0; k];
    for i in 0..design.n() {
        if !keep(i) {
            continue;
        }
        let row = design.row(i);
        for a in 0..k {
            xty[a] += w[i] * row[a] * y[i];
            for b in 0..=a {
                xtx[(a, b)] += w[i] * row[a] * row[b];
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            xtx[(b, a)] = xtx[(a, b)];
        }
        xtx[(a, a)] += ridge;
    }
    solve_spd(&xtx, &xty, label)
}

pub(crate) fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}
