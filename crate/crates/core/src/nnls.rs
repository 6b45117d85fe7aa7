//! Active-set non-negative least squares (Lawson–Hanson).
//!
//! Solves `min ‖A x − b‖²` subject to `x ≥ 0`. Entries outside the passive set
//! are exactly zero in the returned solution.

use nalgebra::{DMatrix, DVector};

use crate::camera::RANK_TOLERANCE;

#[derive(Debug, Clone)]
pub struct NnlsSolution {
    pub x: DVector<f64>,
    /// `‖A x − b‖²` at the solution.
    pub residual: f64,
    pub iterations: usize,
}

pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> NnlsSolution {
    let n = a.ncols();
    assert_eq!(a.nrows(), b.len(), "nnls: A and b disagree on row count");
    let mut x = DVector::zeros(n);
    if n == 0 {
        return NnlsSolution {
            x,
            residual: b.norm_squared(),
            iterations: 0,
        };
    }

    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())) * b.amax().max(1.0);
    let tol = 10.0 * f64::EPSILON * scale * (a.nrows().max(n) as f64);
    let max_iterations = 3 * n + 30;

    let mut passive = vec![false; n];
    let mut iterations = 0;
    // Columns whose addition immediately produced a non-positive value; they
    // are skipped until the passive set changes again to avoid cycling.
    let mut blocked = vec![false; n];

    loop {
        let w = a.tr_mul(&(b - a * &x));
        let candidate = (0..n)
            .filter(|&j| !passive[j] && !blocked[j])
            .max_by(|&i, &j| w[i].total_cmp(&w[j]).then(j.cmp(&i)));
        let Some(j) = candidate else { break };
        if w[j] <= tol || iterations >= max_iterations {
            break;
        }
        iterations += 1;
        passive[j] = true;

        loop {
            let s = solve_passive(a, b, &passive);
            if passive.iter().enumerate().all(|(i, &p)| !p || s[i] > 0.0) {
                x = s;
                break;
            }
            // Step from x toward s as far as feasibility allows.
            let mut step = 1.0;
            let mut blocking = None;
            for i in 0..n {
                if passive[i] && s[i] <= 0.0 {
                    let denom = x[i] - s[i];
                    let t = if denom > 0.0 { x[i] / denom } else { 0.0 };
                    if blocking.is_none() || t < step {
                        step = t;
                        blocking = Some(i);
                    }
                }
            }
            let step = step.clamp(0.0, 1.0);
            for i in 0..n {
                if passive[i] {
                    x[i] += step * (s[i] - x[i]);
                }
            }
            if let Some(i) = blocking {
                x[i] = 0.0;
            }
            for i in 0..n {
                if passive[i] && x[i] <= 0.0 {
                    passive[i] = false;
                    x[i] = 0.0;
                }
            }
            if !passive.iter().any(|&p| p) {
                break;
            }
        }
        if !passive[j] {
            blocked[j] = true;
        } else {
            blocked.iter_mut().for_each(|b| *b = false);
        }
    }

    for i in 0..n {
        if !passive[i] || x[i] < 0.0 {
            x[i] = 0.0;
        }
    }
    let residual = (a * &x - b).norm_squared();
    NnlsSolution {
        x,
        residual,
        iterations,
    }
}

fn solve_passive(a: &DMatrix<f64>, b: &DVector<f64>, passive: &[bool]) -> DVector<f64> {
    let cols: Vec<usize> = (0..passive.len()).filter(|&i| passive[i]).collect();
    let sub = a.select_columns(cols.iter());
    let svd = sub.svd(true, true);
    let max = svd.singular_values.max();
    let sol = svd
        .solve(b, RANK_TOLERANCE * max)
        .unwrap_or_else(|_| DVector::zeros(cols.len()));
    let mut full = DVector::zeros(passive.len());
    for (k, &c) in cols.iter().enumerate() {
        full[c] = sol[k];
    }
    full
}

/// Largest violation of the KKT conditions at `x`: `g ≥ 0` where `x = 0`,
/// `g = 0` where `x > 0`, with `g = Aᵀ(Ax − b)`; negative entries of `x`
/// count as violations too.
pub fn kkt_violation(a: &DMatrix<f64>, b: &DVector<f64>, x: &DVector<f64>) -> f64 {
    let g = a.tr_mul(&(a * x - b));
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        if x[i] < 0.0 {
            worst = worst.max(-x[i]);
        }
        if x[i] > 0.0 {
            worst = worst.max(g[i].abs());
        } else {
            worst = worst.max(-g[i]);
        }
    }
    worst
}
