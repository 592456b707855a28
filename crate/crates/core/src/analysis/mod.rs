//! Diagnostics for a batch edit: per-item misalignment scores, the
//! reconstruction coefficients of the closed-form update, the norm bound on
//! each item's reconstruction residual, and the self-weight decay traced
//! under same-subject additions.

mod simplex;

pub use simplex::{project_simplex, simplex_least_squares, SimplexSolution};

use crate::fmath;
use crate::numerics::{
    kl_divergence, norm2, pseudo_inverse, woodbury_update, DenseMatrix, NumericsError, ProbVector,
    SimilaritySet,
};
use alloc::vec::Vec;
use core::fmt;

#[derive(Clone, Debug, PartialEq)]
pub enum AnalysisError {
    Numerics(NumericsError),
    TooFewItems { n: usize },
    IndexOutOfRange { index: usize, n: usize },
    ShapeMismatch { context: &'static str },
    BadRidge,
    SimplexNoConvergence { gap: f64 },
    BoundViolation { item: usize, slack: f64 },
}

impl fmt::Display for AnalysisError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AnalysisError::Numerics(e) => write!(f, "{e}"),
            AnalysisError::TooFewItems { n } => {
                write!(f, "need at least 2 items, got {n}")
            }
            AnalysisError::IndexOutOfRange { index, n } => {
                write!(f, "item {index} out of range for {n} items")
            }
            AnalysisError::ShapeMismatch { context } => write!(f, "shape mismatch: {context}"),
            AnalysisError::BadRidge => write!(f, "ridge must be > 0 for the incremental trace"),
            AnalysisError::SimplexNoConvergence { gap } => {
                write!(f, "simplex solver did not converge; final gap {gap}")
            }
            AnalysisError::BoundViolation { item, slack } => {
                write!(f, "reconstruction bound violated at item {item}: slack {slack}")
            }
        }
    }
}

impl From<NumericsError> for AnalysisError {
    fn from(e: NumericsError) -> Self {
        AnalysisError::Numerics(e)
    }
}

/// Columns of a matrix, unit-normalized; errors on a zero column.
fn unit_columns(m: &DenseMatrix, what: &'static str) -> Result<Vec<Vec<f64>>, AnalysisError> {
    let _ = what;
    let mut out = Vec::with_capacity(m.cols());
    for j in 0..m.cols() {
        let mut c = m.column(j);
        let n = norm2(&c);
        if n == 0.0 {
            return Err(AnalysisError::Numerics(NumericsError::ZeroColumn { col: j }));
        }
        for v in c.iter_mut() {
            *v /= n;
        }
        out.push(c);
    }
    Ok(out)
}

/// Per-item misalignment: KL between the temperature-normalized residual
/// cosine distribution and the key cosine distribution, over all j != i.
pub fn misalignment_score(
    k: &DenseMatrix,
    r: &DenseMatrix,
    i: usize,
    temperature: f64,
) -> Result<f64, AnalysisError> {
    let scores = misalignment_scores(k, r, temperature)?;
    scores
        .get(i)
        .copied()
        .ok_or(AnalysisError::IndexOutOfRange { index: i, n: scores.len() })
}

/// All per-item misalignment scores at once (one pass over the cosines).
pub fn misalignment_scores(
    k: &DenseMatrix,
    r: &DenseMatrix,
    temperature: f64,
) -> Result<Vec<f64>, AnalysisError> {
    let n = k.cols();
    if n < 2 {
        return Err(AnalysisError::TooFewItems { n });
    }
    if r.cols() != n {
        return Err(AnalysisError::ShapeMismatch {
            context: "keys and residuals must have one column per item",
        });
    }
    let k_unit = unit_columns(k, "keys")?;
    let r_unit = unit_columns(r, "residuals")?;
    let mut scores = Vec::with_capacity(n);
    for i in 0..n {
        let mut k_entries = Vec::with_capacity(n - 1);
        let mut r_entries = Vec::with_capacity(n - 1);
        for j in 0..n {
            if j == i {
                continue;
            }
            k_entries.push((j, cos_unit(&k_unit[i], &k_unit[j])));
            r_entries.push((j, cos_unit(&r_unit[i], &r_unit[j])));
        }
        let p_k = crate::numerics::normalize_similarities(
            &SimilaritySet::try_new(i, k_entries)?,
            temperature,
        )?;
        let p_r = crate::numerics::normalize_similarities(
            &SimilaritySet::try_new(i, r_entries)?,
            temperature,
        )?;
        scores.push(kl_divergence(&p_r, &p_k)?);
    }
    Ok(scores)
}

#[inline]
fn cos_unit(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        s += x * y;
    }
    s.clamp(-1.0, 1.0)
}

/// Summary of a batch's misalignment.
#[derive(Clone, Debug)]
pub struct MisalignmentReport {
    pub scores: Vec<f64>,
    pub sum: f64,
    pub temperature: f64,
}

pub fn misalignment_report(
    k: &DenseMatrix,
    r: &DenseMatrix,
    temperature: f64,
) -> Result<MisalignmentReport, AnalysisError> {
    let scores = misalignment_scores(k, r, temperature)?;
    let sum = scores.iter().sum();
    Ok(MisalignmentReport {
        scores,
        sum,
        temperature,
    })
}

/// beta_ij = k_j^T (K K^T + ridge I)^+ k_i: how strongly the update maps
/// key i onto residual j.
#[derive(Clone, Debug)]
pub struct BetaMatrix {
    pub matrix: DenseMatrix,
    pub ridge: f64,
}

pub fn beta_coefficients(k: &DenseMatrix, ridge: f64) -> Result<BetaMatrix, AnalysisError> {
    for j in 0..k.cols() {
        if norm2(&k.column(j)) == 0.0 {
            return Err(AnalysisError::Numerics(NumericsError::ZeroColumn { col: j }));
        }
    }
    let mut gram = k.matmul_bt(k)?;
    if ridge > 0.0 {
        gram.add_diagonal(ridge);
    }
    let pinv = pseudo_inverse(&gram, 1e-12)?;
    // beta = K^T M^+ K.
    let pk = pinv.matmul(k)?;
    let beta = k.transpose().matmul(&pk)?;
    Ok(BetaMatrix {
        matrix: beta,
        ridge,
    })
}

/// e_i = sum_j beta_ij r_j - r_i for every item.
pub fn reconstruction_residuals(
    k: &DenseMatrix,
    r: &DenseMatrix,
    beta: &BetaMatrix,
) -> Result<Vec<Vec<f64>>, AnalysisError> {
    let n = beta.matrix.rows();
    if beta.matrix.cols() != n || k.cols() != n || r.cols() != n {
        return Err(AnalysisError::ShapeMismatch {
            context: "beta must be N x N matching the key and residual columns",
        });
    }
    // E = R beta^T - R, one column per item.
    let e = r.matmul_bt(&beta.matrix)?;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut col = e.column(i);
        for (c, rv) in col.iter_mut().zip(r.column(i).iter()) {
            *c -= rv;
        }
        out.push(col);
    }
    Ok(out)
}

/// Everything behind one item's reconstruction bound.
#[derive(Clone, Debug)]
pub struct BoundReport {
    pub item: usize,
    pub e_norm: f64,
    /// Sum of the other residual norms.
    pub c_i: f64,
    /// KL(q || p) between the simplex weights and the positive-part beta
    /// distribution; infinite when q puts mass where p has none.
    pub score: f64,
    pub beta_ii: f64,
    pub eps_norm: f64,
    /// Contribution of negative beta entries, reported separately.
    pub neg_correction: f64,
    pub bound: f64,
    pub slack: f64,
    /// True when the bound is infinite (empty positive part or infinite KL)
    /// and therefore trivially satisfied.
    pub infinite: bool,
    pub solver_iterations: usize,
}

/// Checks that || e_i || stays below
/// C_i sqrt(KL(q||p)/2) + neg_correction + |beta_ii| ||r_i|| + ||eps_i||,
/// where p comes from the positive parts of the beta row and q is the best
/// convex reconstruction of r_i from the other residuals. A violation is
/// fatal; an infinite bound is reported as trivially satisfied.
pub fn bound_check(k: &DenseMatrix, r: &DenseMatrix, i: usize) -> Result<BoundReport, AnalysisError> {
    let n = k.cols();
    if n < 2 {
        return Err(AnalysisError::TooFewItems { n });
    }
    if i >= n {
        return Err(AnalysisError::IndexOutOfRange { index: i, n });
    }
    if r.cols() != n {
        return Err(AnalysisError::ShapeMismatch {
            context: "keys and residuals must have one column per item",
        });
    }
    let beta = beta_coefficients(k, 0.0)?;
    let e_all = reconstruction_residuals(k, r, &beta)?;
    let e_norm = norm2(&e_all[i]);
    let beta_ii = beta.matrix.at(i, i);
    let r_i = r.column(i);
    let r_i_norm = norm2(&r_i);

    let others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
    let r_norms: Vec<f64> = others.iter().map(|&j| norm2(&r.column(j))).collect();
    let c_i: f64 = r_norms.iter().sum();
    let mut neg_correction = 0.0;
    let mut s_total = 0.0;
    let mut positive_part = Vec::with_capacity(others.len());
    for (slot, &j) in others.iter().enumerate() {
        let b = beta.matrix.at(i, j);
        if b > 0.0 {
            positive_part.push(b);
            s_total += b;
        } else {
            positive_part.push(0.0);
            neg_correction += -b * r_norms[slot];
        }
    }

    // Best convex reconstruction of r_i from the other residuals.
    let columns: Vec<Vec<f64>> = others.iter().map(|&j| r.column(j)).collect();
    let sol = simplex_least_squares(&columns, &r_i, 1e-8, 10_000);
    if !sol.converged {
        return Err(AnalysisError::SimplexNoConvergence { gap: sol.gap });
    }
    let mut eps = r_i.clone();
    for (w, col) in sol.weights.iter().zip(columns.iter()) {
        for (e, v) in eps.iter_mut().zip(col.iter()) {
            *e -= w * v;
        }
    }
    let eps_norm = norm2(&eps);

    let (score, bound, infinite) = if s_total <= 1e-12 {
        (f64::INFINITY, f64::INFINITY, true)
    } else {
        let p: Vec<f64> = positive_part.iter().map(|s| s / s_total).collect();
        // Renormalize the solver output exactly before the divergence.
        let q_sum: f64 = sol.weights.iter().sum();
        let q: Vec<f64> = sol.weights.iter().map(|w| w / q_sum).collect();
        let score = kl_divergence(&ProbVector::try_new(q)?, &ProbVector::try_new(p)?)?;
        if score.is_infinite() {
            (score, f64::INFINITY, true)
        } else {
            let bound =
                c_i * fmath::sqrt(score / 2.0) + neg_correction + fmath::abs(beta_ii) * r_i_norm + eps_norm;
            (score, bound, false)
        }
    };
    let slack = bound - e_norm;
    if slack.is_finite() && slack < -1e-9 {
        return Err(AnalysisError::BoundViolation { item: i, slack });
    }
    Ok(BoundReport {
        item: i,
        e_norm,
        c_i,
        score,
        beta_ii,
        eps_norm,
        neg_correction,
        bound,
        slack,
        infinite,
        solver_iterations: sol.iterations,
    })
}

/// Self-weight trajectory: beta_ii recomputed after each same-subject key
/// is folded into the Gram inverse by a rank-one update. Entry 0 is the
/// value before any addition.
pub fn same_subject_trace(
    base_keys: &[Vec<f64>],
    subject_keys: &[Vec<f64>],
    i: usize,
    ridge: f64,
) -> Result<Vec<f64>, AnalysisError> {
    if !(ridge > 0.0) {
        return Err(AnalysisError::BadRidge);
    }
    if i >= base_keys.len() {
        return Err(AnalysisError::IndexOutOfRange {
            index: i,
            n: base_keys.len(),
        });
    }
    for (j, key) in base_keys.iter().chain(subject_keys.iter()).enumerate() {
        if norm2(key) == 0.0 {
            return Err(AnalysisError::Numerics(NumericsError::ZeroColumn { col: j }));
        }
    }
    let d = base_keys[0].len();
    let mut gram = DenseMatrix::zeros(d, d);
    for key in base_keys {
        let data = gram.as_mut_slice();
        for a in 0..d {
            let ka = key[a];
            if ka == 0.0 {
                continue;
            }
            let row = &mut data[a * d..(a + 1) * d];
            for (rv, &kb) in row.iter_mut().zip(key.iter()) {
                *rv += ka * kb;
            }
        }
    }
    gram.add_diagonal(ridge);
    let mut inv = pseudo_inverse(&gram, 1e-14)?;
    let k_i = &base_keys[i];
    let self_weight = |m: &DenseMatrix| -> Result<f64, AnalysisError> {
        let mk = m.matvec(k_i)?;
        Ok(k_i.iter().zip(mk.iter()).map(|(a, b)| a * b).sum())
    };
    let mut trace = Vec::with_capacity(subject_keys.len() + 1);
    trace.push(self_weight(&inv)?);
    for key in subject_keys {
        inv = woodbury_update(&inv, key)?;
        trace.push(self_weight(&inv)?);
    }
    Ok(trace)
}
