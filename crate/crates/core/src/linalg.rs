//! Small dense helpers on top of nalgebra for the symmetric positive
//! definite systems that appear throughout the estimator.

use nalgebra::{DMatrix, DVector};

use crate::data_model::ModelSet;
use crate::error::{Error, Result};

/// Minimum eigenvalue below which a submodel Hessian is treated as singular.
pub const SINGULAR_EIGEN_THRESHOLD: f64 = 1e-10;

pub fn min_eigenvalue(h: &DMatrix<f64>) -> f64 {
    if h.nrows() == 0 {
        return f64::INFINITY;
    }
    h.clone()
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

pub fn condition_number(h: &DMatrix<f64>) -> f64 {
    let eig = h.clone().symmetric_eigenvalues();
    let lo = eig.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo <= 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

fn check_invertible(h: &DMatrix<f64>, model: &ModelSet) -> Result<()> {
    let lam = min_eigenvalue(h);
    if !(lam > SINGULAR_EIGEN_THRESHOLD) {
        return Err(Error::Singular {
            model: model.clone(),
            min_eigenvalue: lam,
        });
    }
    Ok(())
}

/// Solves `h x = g` for symmetric positive definite `h` by Cholesky with one
/// step of iterative refinement.
pub fn solve_spd(h: &DMatrix<f64>, g: &DVector<f64>, model: &ModelSet) -> Result<DVector<f64>> {
    check_invertible(h, model)?;
    let chol = h.clone().cholesky().ok_or_else(|| Error::Singular {
        model: model.clone(),
        min_eigenvalue: min_eigenvalue(h),
    })?;
    let mut x = chol.solve(g);
    let r = g - h * &x;
    x += chol.solve(&r);
    Ok(x)
}

/// Inverse of a symmetric positive definite matrix, symmetrized.
pub fn inverse_spd(h: &DMatrix<f64>, model: &ModelSet) -> Result<DMatrix<f64>> {
    check_invertible(h, model)?;
    let chol = h.clone().cholesky().ok_or_else(|| Error::Singular {
        model: model.clone(),
        min_eigenvalue: min_eigenvalue(h),
    })?;
    let inv = chol.inverse();
    Ok((&inv + inv.transpose()) * 0.5)
}

pub fn max_abs(v: impl IntoIterator<Item = f64>) -> f64 {
    v.into_iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub fn max_abs_diff_vec(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    max_abs(a.iter().zip(b.iter()).map(|(x, y)| x - y))
}

pub fn max_abs_diff_mat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    max_abs(a.iter().zip(b.iter()).map(|(x, y)| x - y))
}

pub fn l1_norm(v: &DVector<f64>) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}
