//! Alignment losses tying the residual being optimized to the residuals
//! saved so far, through the geometry of the corresponding keys.
//!
//! For item i with earlier items j < i:
//!   - KL term: KL(normalize(cos(r_i, r_j)) || normalize(cos(k_i, k_j))),
//!     both sides normalized with the same temperature and index order, so
//!     identical cosine sets give exactly zero.
//!   - MSE term: mean squared gap between raw residual cosines and raw key
//!     cosines over the min(top_m, i) largest key cosines.
//!
//! Returns the raw loss values plus the exact gradient of
//! lambda_kl * KL + lambda_mse * MSE with respect to r_i.

use super::{EditError, EditorConfig};
use crate::fmath;
use crate::numerics::{dot, norm2, SimilaritySet};
use alloc::vec;
use alloc::vec::Vec;

const ZERO_NORM_GUARD: f64 = 1e-12;

pub fn alignment_losses(
    i: usize,
    r_i: &[f64],
    saved_residuals: &[Vec<f64>],
    p_k_row: &SimilaritySet,
    cfg: &EditorConfig,
) -> Result<(f64, f64, Vec<f64>), EditError> {
    let dim = r_i.len();
    let mut grad = vec![0.0; dim];
    // First item, or a residual still at the zero initialization: no
    // neighborhood to align against, contributes nothing.
    let r_norm = norm2(r_i);
    if p_k_row.is_empty() || r_norm <= ZERO_NORM_GUARD {
        return Ok((0.0, 0.0, grad));
    }
    if p_k_row.len() > i || p_k_row.entries().iter().any(|(j, _)| *j >= i) {
        return Err(EditError::Config(
            "key similarity row must be restricted to earlier items",
        ));
    }
    if p_k_row.len() > saved_residuals.len() {
        return Err(EditError::Config("missing saved residuals for key row"));
    }

    let n = p_k_row.len();
    let key_cos: Vec<f64> = p_k_row.cosines().collect();

    // Residual cosines and the pieces of their gradients.
    let mut res_cos = vec![0.0; n];
    let mut inv_norm_prod = vec![0.0; n];
    let mut usable = vec![true; n];
    for (slot, (j, _)) in p_k_row.entries().iter().enumerate() {
        let r_j = &saved_residuals[*j];
        let nj = norm2(r_j);
        if nj <= ZERO_NORM_GUARD {
            usable[slot] = false;
            continue;
        }
        inv_norm_prod[slot] = 1.0 / (r_norm * nj);
        res_cos[slot] = dot(r_i, r_j) * inv_norm_prod[slot];
    }

    // KL between the temperature-normalized cosine distributions.
    let tau = cfg.temperature;
    let softmax = |c: &[f64]| -> Vec<f64> {
        let max = c.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut w: Vec<f64> = c.iter().map(|&v| fmath::exp((v - max) / tau)).collect();
        let s: f64 = w.iter().sum();
        for v in w.iter_mut() {
            *v /= s;
        }
        w
    };
    let p_r = softmax(&res_cos);
    let p_k = softmax(&key_cos);
    let mut l_kl = 0.0;
    for (pr, pk) in p_r.iter().zip(p_k.iter()) {
        l_kl += pr * fmath::ln(pr / pk);
    }
    if l_kl < 0.0 && l_kl > -1e-12 {
        l_kl = 0.0;
    }

    // Top-M key cosines by value (ties broken by index order).
    let m_used = cfg.top_m.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        key_cos[b]
            .partial_cmp(&key_cos[a])
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let top = &order[..m_used];
    let mut l_mse = 0.0;
    for &slot in top {
        let d = res_cos[slot] - key_cos[slot];
        l_mse += d * d;
    }
    l_mse /= m_used as f64;

    // d(loss)/d(res_cos), combining both terms with their weights.
    let (w_kl, w_mse) = cfg.effective_lambdas();
    let mut dcos = vec![0.0; n];
    if w_kl != 0.0 {
        for slot in 0..n {
            let term = fmath::ln(p_r[slot] / p_k[slot]) - l_kl;
            dcos[slot] += w_kl * p_r[slot] * term / tau;
        }
    }
    if w_mse != 0.0 {
        for &slot in top {
            dcos[slot] += w_mse * 2.0 * (res_cos[slot] - key_cos[slot]) / m_used as f64;
        }
    }

    // Chain through d cos(r_i, r_j) / d r_i.
    let inv_r2 = 1.0 / (r_norm * r_norm);
    for (slot, (j, _)) in p_k_row.entries().iter().enumerate() {
        if !usable[slot] || dcos[slot] == 0.0 {
            continue;
        }
        let r_j = &saved_residuals[*j];
        let c = res_cos[slot];
        let scale = dcos[slot];
        for ((g, &rj), &ri) in grad.iter_mut().zip(r_j.iter()).zip(r_i.iter()) {
            *g += scale * (rj * inv_norm_prod[slot] - c * ri * inv_r2);
        }
    }

    Ok((l_kl, l_mse, grad))
}
