//! Jacobi-preconditioned conjugate gradients and BiCGSTAB, one right-hand side at a time.

use crate::error::{ConvergenceFailure, Error, Result};
use crate::sparse::{dot, norm2, CsrMatrix};

/// Outcome of a single-column Krylov solve.
#[derive(Debug, Clone)]
pub struct ColumnSolve {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub relative_residual: f64,
}

fn inverse_diagonal(a: &CsrMatrix) -> Vec<f64> {
    a.diagonal()
        .into_iter()
        .map(|d| if d != 0.0 { 1.0 / d } else { 1.0 })
        .collect()
}

fn true_residual(a: &CsrMatrix, x: &[f64], b: &[f64]) -> f64 {
    let ax = a.mul_vec(x);
    let r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
    norm2(&r)
}

/// Solves a symmetric positive definite system from `x0 = 0`.
pub fn pcg(a: &CsrMatrix, b: &[f64], tol: f64, max_iter: usize, column: usize) -> Result<ColumnSolve> {
    let n = b.len();
    let b_norm = norm2(b);
    if b_norm == 0.0 {
        return Ok(ColumnSolve {
            x: vec![0.0; n],
            iterations: 0,
            relative_residual: 0.0,
        });
    }
    let m_inv = inverse_diagonal(a);
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&m_inv).map(|(ri, mi)| ri * mi).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut q = vec![0.0; n];
    let mut best = (f64::INFINITY, Vec::new());
    for it in 1..=max_iter {
        a.mul_vec_into(&p, &mut q);
        let pq = dot(&p, &q);
        if !(pq > 0.0) {
            return Err(Error::NotPositiveDefinite {
                pivot: column,
                value: pq,
            });
        }
        let alpha = rz / pq;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * q[i];
        }
        let rel = norm2(&r) / b_norm;
        if rel <= tol {
            return Ok(ColumnSolve {
                relative_residual: true_residual(a, &x, b) / b_norm,
                x,
                iterations: it,
            });
        }
        if rel < best.0 {
            best = (rel, x.clone());
        }
        for i in 0..n {
            z[i] = r[i] * m_inv[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::NoConvergence(Box::new(ConvergenceFailure {
        iterations: max_iter,
        relative_residual: best.0,
        column,
        best_iterate: best.1,
    })))
}

/// Right-preconditioned BiCGSTAB from `x0 = 0`.
pub fn bicgstab(a: &CsrMatrix, b: &[f64], tol: f64, max_iter: usize, column: usize) -> Result<ColumnSolve> {
    let n = b.len();
    let b_norm = norm2(b);
    if b_norm == 0.0 {
        return Ok(ColumnSolve {
            x: vec![0.0; n],
            iterations: 0,
            relative_residual: 0.0,
        });
    }
    let m_inv = inverse_diagonal(a);
    let tiny = f64::EPSILON * f64::EPSILON * b_norm * b_norm;
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let r_hat = r.clone();
    let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut p_hat = vec![0.0; n];
    let mut s = vec![0.0; n];
    let mut s_hat = vec![0.0; n];
    let mut t = vec![0.0; n];
    let mut best = (f64::INFINITY, Vec::new());
    for it in 1..=max_iter {
        let rho_new = dot(&r_hat, &r);
        if rho_new.abs() <= tiny {
            return Err(Error::Breakdown(format!("rho vanished at iteration {it} (column {column})")));
        }
        let beta = (rho_new / rho) * (alpha / omega);
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
            p_hat[i] = p[i] * m_inv[i];
        }
        a.mul_vec_into(&p_hat, &mut v);
        let rv = dot(&r_hat, &v);
        if rv.abs() <= tiny {
            return Err(Error::Breakdown(format!("<r0, v> vanished at iteration {it} (column {column})")));
        }
        alpha = rho_new / rv;
        for i in 0..n {
            s[i] = r[i] - alpha * v[i];
        }
        if norm2(&s) / b_norm <= tol {
            for i in 0..n {
                x[i] += alpha * p_hat[i];
            }
            return Ok(ColumnSolve {
                relative_residual: true_residual(a, &x, b) / b_norm,
                x,
                iterations: it,
            });
        }
        for i in 0..n {
            s_hat[i] = s[i] * m_inv[i];
        }
        a.mul_vec_into(&s_hat, &mut t);
        let tt = dot(&t, &t);
        if tt == 0.0 {
            return Err(Error::Breakdown(format!("t vanished at iteration {it} (column {column})")));
        }
        omega = dot(&t, &s) / tt;
        if omega == 0.0 {
            return Err(Error::Breakdown(format!("omega vanished at iteration {it} (column {column})")));
        }
        for i in 0..n {
            x[i] += alpha * p_hat[i] + omega * s_hat[i];
            r[i] = s[i] - omega * t[i];
        }
        rho = rho_new;
        let rel = norm2(&r) / b_norm;
        if rel <= tol {
            return Ok(ColumnSolve {
                relative_residual: true_residual(a, &x, b) / b_norm,
                x,
                iterations: it,
            });
        }
        if rel < best.0 {
            best = (rel, x.clone());
        }
    }
    Err(Error::NoConvergence(Box::new(ConvergenceFailure {
        iterations: max_iter,
        relative_residual: best.0,
        column,
        best_iterate: best.1,
    })))
}
