//! Weighted cross products, a Jacobi-preconditioned conjugate gradient
//! solver and eigenvalue-clipped pseudo-inverses.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative residual at which PCG stops.
pub const PCG_TOL: f64 = 1e-14;
/// Relative residual above which an unconverged solve is an error.
pub const PCG_ACCEPT: f64 = 1e-9;

/// A' diag(w) B.
pub fn weighted_cross(a: &DMatrix<f64>, w: &[f64], b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let mut out = DMatrix::zeros(a.ncols(), b.ncols());
    for j in 0..b.ncols() {
        let bj = b.column(j);
        for i in 0..a.ncols() {
            let ai = a.column(i);
            let mut s = 0.0;
            for r in 0..n {
                s += ai[r] * w[r] * bj[r];
            }
            out[(i, j)] = s;
        }
    }
    out
}

/// A' diag(w) y.
pub fn weighted_cross_vec(a: &DMatrix<f64>, w: &[f64], y: &[f64]) -> DVector<f64> {
    DVector::from_iterator(
        a.ncols(),
        a.column_iter().map(|c| c.iter().zip(w).zip(y).map(|((a, w), y)| a * w * y).sum()),
    )
}

/// Fails when a symmetric matrix has an eigenvalue below −tol·‖A‖.
pub fn check_psd(a: &DMatrix<f64>, what: &str) -> Result<()> {
    let eig = a.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let min = eig.eigenvalues.iter().fold(f64::INFINITY, |m, &v| m.min(v));
    if min < -1e-10 * max.max(f64::MIN_POSITIVE) {
        return Err(Error::Numeric {
            message: format!("{what} is not positive semi-definite (sample weights too negative)"),
            residual: min,
        });
    }
    Ok(())
}

/// Solves the symmetric positive definite system A x = b by conjugate
/// gradients with a diagonal preconditioner, restarting until the relative
/// residual reaches [`PCG_TOL`] or the iteration budget is spent.
pub fn pcg(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let p = b.len();
    let bnorm = b.norm();
    if bnorm == 0.0 {
        return Ok(DVector::zeros(p));
    }
    let inv_diag = DVector::from_iterator(
        p,
        a.diagonal().iter().map(|&d| if d > 0.0 { 1.0 / d } else { 1.0 }),
    );
    let mut x = DVector::zeros(p);
    let max_iter = 20 * p + 200;
    let mut iter = 0;
    let mut rel = f64::INFINITY;
    while iter < max_iter {
        let mut r = b - a * &x;
        rel = r.norm() / bnorm;
        if rel <= PCG_TOL {
            return Ok(x);
        }
        let mut z = r.component_mul(&inv_diag);
        let mut d = z.clone();
        let mut rz = r.dot(&z);
        // One Krylov cycle of at most 2p steps, then recompute the residual.
        for _ in 0..(2 * p).max(1) {
            iter += 1;
            let ad = a * &d;
            let dad = d.dot(&ad);
            if !(dad > 0.0) {
                break;
            }
            let alpha = rz / dad;
            x.axpy(alpha, &d, 1.0);
            r.axpy(-alpha, &ad, 1.0);
            if r.norm() / bnorm <= PCG_TOL * 0.1 {
                break;
            }
            z = r.component_mul(&inv_diag);
            let rz_next = r.dot(&z);
            d = &z + &d * (rz_next / rz);
            rz = rz_next;
        }
        let true_rel = (b - a * &x).norm() / bnorm;
        if true_rel >= rel * 0.999 && true_rel <= PCG_ACCEPT {
            // Stagnated at rounding level.
            return Ok(x);
        }
        rel = true_rel;
    }
    if rel <= PCG_ACCEPT {
        return Ok(x);
    }
    Err(Error::Numeric { message: format!("conjugate gradient did not converge in {max_iter} iterations"), residual: rel })
}

/// Pseudo-inverse of a symmetric matrix after clipping negative
/// eigenvalues to zero, with the rank that remains.
pub fn clipped_pinv(a: &DMatrix<f64>) -> (DMatrix<f64>, usize) {
    let sym = (a + a.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let max = eig.eigenvalues.iter().fold(0.0_f64, |m, &v| m.max(v));
    let cut = 1e-10 * max;
    let n = a.nrows();
    let mut inv = DMatrix::zeros(n, n);
    let mut rank = 0;
    for (i, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam > cut && lam > 0.0 {
            rank += 1;
            let v = eig.eigenvectors.column(i);
            inv += v * v.transpose() / lam;
        }
    }
    (inv, rank)
}

/// Smallest over largest eigenvalue of a symmetric PSD matrix.
pub fn condition_ratio(a: &DMatrix<f64>) -> f64 {
    let eig = a.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().fold(0.0_f64, |m, &v| m.max(v));
    let min = eig.eigenvalues.iter().fold(f64::INFINITY, |m, &v| m.min(v));
    if max <= 0.0 {
        0.0
    } else {
        min / max
    }
}
