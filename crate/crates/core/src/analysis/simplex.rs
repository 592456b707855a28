//! Nonnegative least squares on the probability simplex by accelerated
//! projected gradient: minimize || A q - b ||^2 subject to q >= 0 and
//! sum(q) = 1.

use crate::fmath;
use alloc::vec;
use alloc::vec::Vec;

/// Euclidean projection onto the probability simplex (sort-based).
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let n = v.len();
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap_or(core::cmp::Ordering::Equal));
    let mut cum = 0.0;
    let mut theta = 0.0;
    let mut found = false;
    for (i, &u) in sorted.iter().enumerate() {
        cum += u;
        let t = (cum - 1.0) / (i + 1) as f64;
        if u - t > 0.0 {
            theta = t;
            found = true;
        } else {
            break;
        }
    }
    if !found {
        // All mass on the largest coordinate.
        let mut out = vec![0.0; n];
        let mut best = 0;
        for (i, &x) in v.iter().enumerate() {
            if x > v[best] {
                best = i;
            }
        }
        out[best] = 1.0;
        return out;
    }
    v.iter().map(|&x| (x - theta).max(0.0)).collect()
}

pub struct SimplexSolution {
    pub weights: Vec<f64>,
    pub iterations: usize,
    /// Fixed-point gap at exit: max |q - project(q - grad/L)|.
    pub gap: f64,
    pub converged: bool,
}

/// `columns` are the vectors being combined; `target` is the vector to
/// approximate. Runs at most `max_iters` accelerated projected-gradient
/// steps and reports convergence when the fixed-point gap drops to `tol`.
pub fn simplex_least_squares(
    columns: &[Vec<f64>],
    target: &[f64],
    tol: f64,
    max_iters: usize,
) -> SimplexSolution {
    let m = columns.len();
    debug_assert!(m > 0);
    // Gram matrix and linear term.
    let mut gram = vec![0.0; m * m];
    let mut lin = vec![0.0; m];
    for a in 0..m {
        for b in a..m {
            let mut s = 0.0;
            for (x, y) in columns[a].iter().zip(columns[b].iter()) {
                s += x * y;
            }
            gram[a * m + b] = s;
            gram[b * m + a] = s;
        }
        let mut s = 0.0;
        for (x, y) in columns[a].iter().zip(target.iter()) {
            s += x * y;
        }
        lin[a] = s;
    }
    // Gershgorin upper bound on the largest eigenvalue gives a safe step.
    let mut lip = 0.0f64;
    for a in 0..m {
        let row_sum: f64 = gram[a * m..(a + 1) * m].iter().map(|v| fmath::abs(*v)).sum();
        lip = lip.max(row_sum);
    }
    let step = if lip > 0.0 { 1.0 / lip } else { 1.0 };

    let grad_at = |q: &[f64], out: &mut [f64]| {
        for a in 0..m {
            let mut s = -lin[a];
            let row = &gram[a * m..(a + 1) * m];
            for (g, &qv) in row.iter().zip(q.iter()) {
                s += g * qv;
            }
            out[a] = s;
        }
    };
    let objective = |q: &[f64]| -> f64 {
        let mut val = 0.0;
        for a in 0..m {
            let row = &gram[a * m..(a + 1) * m];
            let mut gq = 0.0;
            for (g, &qv) in row.iter().zip(q.iter()) {
                gq += g * qv;
            }
            val += q[a] * (0.5 * gq - lin[a]);
        }
        val
    };

    let mut q = vec![1.0 / m as f64; m];
    let mut y = q.clone();
    let mut t_prev = 1.0f64;
    let mut grad = vec![0.0; m];
    let mut obj_prev = objective(&q);
    let mut gap = f64::INFINITY;
    for iter in 0..max_iters {
        grad_at(&y, &mut grad);
        let moved: Vec<f64> = y
            .iter()
            .zip(grad.iter())
            .map(|(v, g)| v - step * g)
            .collect();
        let q_next = project_simplex(&moved);

        // Fixed-point gap measured at the new iterate.
        grad_at(&q_next, &mut grad);
        let fp: Vec<f64> = q_next
            .iter()
            .zip(grad.iter())
            .map(|(v, g)| v - step * g)
            .collect();
        let fp = project_simplex(&fp);
        gap = q_next
            .iter()
            .zip(fp.iter())
            .map(|(a, b)| fmath::abs(a - b))
            .fold(0.0, f64::max);

        let obj = objective(&q_next);
        // Monotone restart keeps acceleration safe.
        let t_next;
        if obj > obj_prev {
            y = q_next.clone();
            t_next = 1.0;
        } else {
            t_next = 0.5 * (1.0 + fmath::sqrt(1.0 + 4.0 * t_prev * t_prev));
            let beta = (t_prev - 1.0) / t_next;
            y = q_next
                .iter()
                .zip(q.iter())
                .map(|(new, old)| new + beta * (new - old))
                .collect();
        }
        obj_prev = obj.min(obj_prev);
        q = q_next;
        t_prev = t_next;
        if gap <= tol {
            return SimplexSolution {
                weights: q,
                iterations: iter + 1,
                gap,
                converged: true,
            };
        }
    }
    SimplexSolution {
        weights: q,
        iterations: max_iters,
        gap,
        converged: false,
    }
}
