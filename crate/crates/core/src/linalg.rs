//! Small dense symmetric-matrix routines behind the Fréchet distance.
//!
//! Everything here runs in f64 regardless of the crate-wide scalar: the
//! matrices involved are tiny (embedding dimension squared), so the extra
//! precision is free and spares the metric a loss of accuracy.

use ndarray::{Array1, Array2};

use crate::{Error, Result};

fn check_square(a: &Array2<f64>) -> Result<usize> {
    let (r, c) = a.dim();
    if r != c {
        return Err(Error::dimension(format!("matrix must be square, got {r}x{c}")));
    }
    Ok(r)
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns (eigenvalues, eigenvectors as columns) with A = V·diag(λ)·Vᵀ.
/// Symmetry is assumed, not checked; feed it symmetrized input.
pub fn symmetric_eigen(a: &Array2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    let n = check_square(a)?;
    let mut a = a.clone();
    let mut v = Array2::<f64>::eye(n);
    let frob: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let tol = (frob * 1e-14).max(1e-300);
    for _sweep in 0..100 {
        let off: f64 = {
            let mut s = 0.0;
            for p in 0..n {
                for q in (p + 1)..n {
                    s += a[[p, q]] * a[[p, q]];
                }
            }
            s.sqrt()
        };
        if off <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[[p, q]];
                if apq.abs() <= tol / (n * n) as f64 {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[[k, p]];
                    let akq = a[[k, q]];
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[[p, k]];
                    let aqk = a[[q, k]];
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eigvals = Array1::from_shape_fn(n, |i| a[[i, i]]);
    Ok((eigvals, v))
}

/// Square root of a symmetric positive semi-definite matrix.
///
/// Eigenvalues in (−1e-6, 0) are treated as rounding noise and clamped to
/// zero; anything below −1e-6 means the input was not PSD and is reported as
/// a numerical degeneracy.
pub fn sqrtm_psd(a: &Array2<f64>) -> Result<Array2<f64>> {
    let n = check_square(a)?;
    let (eigvals, v) = symmetric_eigen(a)?;
    let mut roots = Array1::<f64>::zeros(n);
    for (i, &lam) in eigvals.iter().enumerate() {
        if lam < -1e-6 {
            return Err(Error::NumericalDegeneracy(format!(
                "matrix has eigenvalue {lam:.3e} < -1e-6; not positive semi-definite"
            )));
        }
        roots[i] = lam.max(0.0).sqrt();
    }
    // V · diag(√λ) · Vᵀ without forming the diagonal matrix.
    let mut scaled = v.clone();
    for (mut col, &r) in scaled.columns_mut().into_iter().zip(roots.iter()) {
        col *= r;
    }
    Ok(scaled.dot(&v.t()))
}

/// (A + Aᵀ)/2 — cheap insurance before feeding products to the eigensolver.
pub fn symmetrize(a: &Array2<f64>) -> Array2<f64> {
    (a + &a.t()) * 0.5
}

pub fn trace(a: &Array2<f64>) -> f64 {
    a.diag().sum()
}
