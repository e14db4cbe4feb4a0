//! Preconditioned conjugate gradients on plain slices.

use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Debug, Clone)]
pub struct PcgOutcome<T> {
    pub solution: Vec<T>,
    pub iterations: usize,
    pub relative_residual: T,
    pub history: Vec<T>,
}

pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    // fixed summation order keeps results bitwise reproducible
    let mut s = T::zero();
    for (x, y) in a.iter().zip(b) {
        s += *x * *y;
    }
    s
}

/// Solves `A x = b` for symmetric positive (semi)definite `A` starting from zero.
///
/// `apply` computes `A p` into its second argument and `precond` applies the
/// inverse preconditioner. Stops when `‖r‖ ≤ tol·‖b‖`.
pub fn pcg<T: Real>(
    solver: &str,
    b: &[T],
    mut apply: impl FnMut(&[T], &mut [T]),
    mut precond: impl FnMut(&[T], &mut [T]),
    tol: T,
    max_iter: usize,
) -> Result<PcgOutcome<T>> {
    let n = b.len();
    let mut x = vec![T::zero(); n];
    let bnorm = dot(b, b).sqrt();
    if bnorm == T::zero() {
        return Ok(PcgOutcome {
            solution: x,
            iterations: 0,
            relative_residual: T::zero(),
            history: vec![],
        });
    }
    let mut r = b.to_vec();
    let mut z = vec![T::zero(); n];
    precond(&r, &mut z);
    let mut p = z.clone();
    let mut ap = vec![T::zero(); n];
    let mut rz = dot(&r, &z);
    let mut history = Vec::new();
    for it in 1..=max_iter {
        apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > T::zero()) {
            return Err(Error::NotConverged {
                solver: format!("{solver} (curvature breakdown)"),
                iterations: it,
                residual: (dot(&r, &r).sqrt() / bnorm).to_f64_lossy(),
                history: history.iter().map(|v: &T| v.to_f64_lossy()).collect(),
            });
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rel = dot(&r, &r).sqrt() / bnorm;
        history.push(rel);
        if rel <= tol {
            return Ok(PcgOutcome {
                solution: x,
                iterations: it,
                relative_residual: rel,
                history,
            });
        }
        precond(&r, &mut z);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::NotConverged {
        solver: solver.to_string(),
        iterations: max_iter,
        residual: history.last().copied().unwrap_or(T::one()).to_f64_lossy(),
        history: history.iter().map(|v| v.to_f64_lossy()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_small_spd_system() {
        // tridiagonal 2,-1 matrix
        let n = 20;
        let b: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let apply = |p: &[f64], out: &mut [f64]| {
            for i in 0..n {
                let l = if i > 0 { p[i - 1] } else { 0.0 };
                let r = if i + 1 < n { p[i + 1] } else { 0.0 };
                out[i] = 2.0 * p[i] - l - r;
            }
        };
        let out = pcg("test", &b, apply, |r, z| z.copy_from_slice(r), 1e-12, 100).unwrap();
        let mut check = vec![0.0; n];
        apply(&out.solution, &mut check);
        for i in 0..n {
            assert!((check[i] - b[i]).abs() < 1e-10);
        }
        assert!(out.iterations <= n);
    }

    #[test]
    fn reports_history_on_failure() {
        let b = vec![1.0, 2.0, 3.0];
        let err = pcg(
            "diag",
            &b,
            |p: &[f64], out: &mut [f64]| {
                out[0] = p[0];
                out[1] = 10.0 * p[1];
                out[2] = 100.0 * p[2];
            },
            |r, z| z.copy_from_slice(r),
            1e-14,
            1,
        )
        .unwrap_err();
        match err {
            Error::NotConverged { history, .. } => assert_eq!(history.len(), 1),
            other => panic!("{other}"),
        }
    }
}
