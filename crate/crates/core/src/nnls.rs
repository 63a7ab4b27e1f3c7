//! Lawson-Hanson active-set non-negative least squares.
//!
//! Minimizes `||A x - b||_2` subject to `x >= 0`. Each passive-set
//! subproblem is solved with an SVD pseudo-inverse, so rank-deficient
//! systems return the minimum-norm solution within the passive set.

use nalgebra::{DMatrix, DVector};

#[derive(Clone, Debug)]
pub struct NnlsSolution {
    pub x: DVector<f64>,
    /// `||A x - b||_2` at the solution.
    pub residual_norm: f64,
    pub iterations: usize,
    /// False when the iteration cap was hit before the KKT conditions held.
    pub converged: bool,
}

fn lstsq_subset(a: &DMatrix<f64>, b: &DVector<f64>, passive: &[bool]) -> DVector<f64> {
    let cols: Vec<usize> = (0..a.ncols()).filter(|&j| passive[j]).collect();
    let mut out = DVector::zeros(a.ncols());
    if cols.is_empty() {
        return out;
    }
    let sub = a.select_columns(cols.iter());
    let svd = crate::linalg::svd(&sub);
    let tol = f64::EPSILON * a.nrows().max(cols.len()) as f64 * svd.singular_values.max();
    let z = svd.solve(b, tol);
    for (k, &j) in cols.iter().enumerate() {
        out[j] = z[k];
    }
    out
}

pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> NnlsSolution {
    assert_eq!(a.nrows(), b.len(), "A and b row counts differ");
    let n = a.ncols();
    let mut x = DVector::<f64>::zeros(n);
    let mut passive = vec![false; n];
    let scale = a.abs().max().max(1e-300) * b.abs().max().max(1e-300);
    let tol = 10.0 * f64::EPSILON * scale * a.nrows().max(n) as f64;
    let max_iter = 30 * n.max(1);
    let mut iterations = 0;
    let mut converged = false;

    loop {
        let w = a.tr_mul(&(b - a * &x));
        let candidate = (0..n)
            .filter(|&j| !passive[j])
            .max_by(|&i, &j| w[i].total_cmp(&w[j]));
        let j = match candidate {
            Some(j) if w[j] > tol => j,
            _ => {
                converged = true;
                break;
            }
        };
        if iterations >= max_iter {
            break;
        }
        passive[j] = true;

        loop {
            iterations += 1;
            let z = lstsq_subset(a, b, &passive);
            let infeasible: Vec<usize> = (0..n).filter(|&k| passive[k] && z[k] <= 0.0).collect();
            if infeasible.is_empty() {
                x = z;
                break;
            }
            let alpha = infeasible
                .iter()
                .map(|&k| x[k] / (x[k] - z[k]))
                .fold(f64::INFINITY, f64::min);
            x += alpha * (&z - &x);
            for k in 0..n {
                if passive[k] && x[k] <= tol.max(1e-15) {
                    passive[k] = false;
                    x[k] = 0.0;
                }
            }
            if iterations >= max_iter {
                break;
            }
        }
    }
    let residual_norm = (a * &x - b).norm();
    NnlsSolution {
        x,
        residual_norm,
        iterations,
        converged,
    }
}

/// Ratio of extreme singular values; infinite for rank-deficient `a`.
pub fn condition_number(a: &DMatrix<f64>) -> f64 {
    let sv = a.clone().svd(false, false).singular_values;
    let (max, min) = (sv.max(), sv.min());
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}
