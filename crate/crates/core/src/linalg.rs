//! One-sided Jacobi SVD.
//!
//! nalgebra's bidiagonal SVD loses several digits on rank-deficient input
//! (a centered data matrix always is), so the PCA and NNLS code use this
//! instead. It is meant for matrices with at most a few hundred columns.

use nalgebra::{DMatrix, DVector};

#[derive(Clone, Debug)]
pub struct Svd {
    /// `m x n` with orthonormal columns, including directions completed
    /// for zero singular values.
    pub u: DMatrix<f64>,
    /// Nonincreasing.
    pub singular_values: DVector<f64>,
    /// `n x n` orthogonal.
    pub v: DMatrix<f64>,
}

const MAX_SWEEPS: usize = 80;

/// Thin SVD of an `m x n` matrix with `m >= n`.
pub fn svd(a: &DMatrix<f64>) -> Svd {
    let (m, n) = a.shape();
    assert!(m >= n, "jacobi svd expects a tall matrix, got {m}x{n}");
    let mut w = a.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = w.column(p).norm_squared();
                let beta = w.column(q).norm_squared();
                let gamma = w.column(p).dot(&w.column(q));
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for mat in [&mut w, &mut v] {
                    for r in 0..mat.nrows() {
                        let (xp, xq) = (mat[(r, p)], mat[(r, q)]);
                        mat[(r, p)] = c * xp - s * xq;
                        mat[(r, q)] = s * xp + c * xq;
                    }
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = (0..n).map(|j| w.column(j).norm()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
    let s_max = order.first().map(|&j| norms[j]).unwrap_or(0.0);
    let null_tol = s_max * f64::EPSILON * m.max(n) as f64;

    let mut u = DMatrix::zeros(m, n);
    let mut vs = DMatrix::zeros(n, n);
    let mut sv = DVector::zeros(n);
    let mut filled = 0;
    let mut null_cols = Vec::new();
    for (k, &j) in order.iter().enumerate() {
        vs.set_column(k, &v.column(j));
        if norms[j] > null_tol && norms[j] > 0.0 {
            sv[k] = norms[j];
            u.set_column(k, &(w.column(j) / norms[j]));
            filled += 1;
        } else {
            null_cols.push(k);
        }
    }
    // Complete U with unit vectors orthogonal to what is already there.
    let mut e = 0;
    for k in null_cols {
        while e < m {
            let mut cand = DVector::zeros(m);
            cand[e] = 1.0;
            e += 1;
            for _ in 0..2 {
                for c in 0..filled {
                    let proj = u.column(c).dot(&cand);
                    cand -= proj * u.column(c);
                }
            }
            let norm = cand.norm();
            if norm > 1e-8 {
                u.set_column(k, &(cand / norm));
                break;
            }
        }
        filled = filled.max(k + 1);
    }
    Svd {
        u,
        singular_values: sv,
        v: vs,
    }
}

impl Svd {
    /// Minimum-norm least-squares solution, discarding singular values at
    /// or below `tol`.
    pub fn solve(&self, b: &DVector<f64>, tol: f64) -> DVector<f64> {
        let utb = self.u.tr_mul(b);
        let mut y = DVector::zeros(self.v.ncols());
        for k in 0..y.len() {
            let s = self.singular_values[k];
            if s > tol {
                y[k] = utb[k] / s;
            }
        }
        &self.v * y
    }
}
