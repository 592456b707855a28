//! Per-fact residual optimization: gradient descent on the prediction loss
//! of the target object under a hidden-state perturbation, plus the
//! alignment terms against earlier items.

use super::losses::alignment_losses;
use super::{EditError, EditorConfig, TraceStep};
use crate::memory_model::{prefixed_prompt, FactTriple};
use crate::numerics::{norm2, SimilaritySet};
use crate::toy_lm::{forward_with, nll_and_grad_resumed, ForwardPass, Perturbation, ToyModel};
use alloc::vec;
use alloc::vec::Vec;

pub(crate) struct FactContexts {
    /// Cached clean passes for each prefixed prompt, with the perturbation
    /// position (final subject token) of each.
    pub passes: Vec<(ForwardPass, usize)>,
    /// Clean hidden state at (last target layer, subject end) of the
    /// unprefixed prompt; the residual is anchored here.
    pub h_orig: Vec<f64>,
}

pub(crate) fn build_contexts(
    model: &ToyModel,
    fact: &FactTriple,
    prefixes: &[Vec<usize>],
    layer: usize,
) -> Result<FactContexts, EditError> {
    let mut passes = Vec::with_capacity(prefixes.len());
    for prefix in prefixes {
        let (tokens, key_pos) = prefixed_prompt(fact, prefix);
        let pass = forward_with(model, &tokens, None)?;
        passes.push((pass, key_pos));
    }
    let plain = forward_with(model, &fact.prompt_tokens, None)?;
    let h_orig = plain.hidden(layer, fact.subject_end).to_vec();
    Ok(FactContexts { passes, h_orig })
}

/// Optimizes r_i from zero with `opt_steps` gradient steps at `opt_rate`,
/// so the perturbed forward prefers the target object while the alignment
/// terms tie the residual geometry to the key geometry of items j < i.
/// Returns (r_i, z_i, trace).
#[allow(clippy::too_many_arguments)]
pub fn optimize_residual(
    model: &ToyModel,
    fact: &FactTriple,
    prefixes: &[Vec<usize>],
    i: usize,
    saved_residuals: &[Vec<f64>],
    p_k_row: &SimilaritySet,
    cfg: &EditorConfig,
) -> Result<(Vec<f64>, Vec<f64>, Vec<TraceStep>), EditError> {
    let layer = *cfg.target_layers.last().ok_or(EditError::Config(
        "target_layers must be nonempty",
    ))?;
    let contexts = build_contexts(model, fact, prefixes, layer)?;
    optimize_residual_with_contexts(model, fact, &contexts, i, saved_residuals, p_k_row, cfg)
}

pub(crate) fn optimize_residual_with_contexts(
    model: &ToyModel,
    fact: &FactTriple,
    contexts: &FactContexts,
    i: usize,
    saved_residuals: &[Vec<f64>],
    p_k_row: &SimilaritySet,
    cfg: &EditorConfig,
) -> Result<(Vec<f64>, Vec<f64>, Vec<TraceStep>), EditError> {
    let h_dim = model.cfg.hidden_dim;
    let layer = *cfg.target_layers.last().unwrap();
    let clamp_max = cfg.norm_clamp_factor * norm2(&contexts.h_orig).max(1e-6);
    let (w_kl, w_mse) = cfg.effective_lambdas();
    let n_ctx = contexts.passes.len() as f64;

    let mut r = vec![0.0; h_dim];
    let mut trace = Vec::with_capacity(cfg.opt_steps);
    for step in 0..cfg.opt_steps {
        let mut nll_sum = 0.0;
        let mut grad = vec![0.0; h_dim];
        for (pass, key_pos) in &contexts.passes {
            let pert = Perturbation {
                layer_index: layer,
                token_position: *key_pos,
                delta: r.clone(),
            };
            let (nll, g) = nll_and_grad_resumed(model, pass, fact.target_object, &pert)?;
            nll_sum += nll;
            for (o, v) in grad.iter_mut().zip(g.iter()) {
                *o += v;
            }
        }
        let nll_mean = nll_sum / n_ctx;
        for g in grad.iter_mut() {
            *g /= n_ctx;
        }

        let (kl_raw, mse_raw, align_grad) =
            alignment_losses(i, &r, saved_residuals, p_k_row, cfg)?;
        let kl_term = w_kl * kl_raw;
        let mse_term = w_mse * mse_raw;
        let total = nll_mean + kl_term + mse_term;
        if !total.is_finite() {
            return Err(EditError::NonFiniteLoss { fact: i, step });
        }
        trace.push(TraceStep {
            nll: nll_mean,
            l_kl: kl_term,
            l_mse: mse_term,
            total,
        });

        for ((rv, g), ag) in r.iter_mut().zip(grad.iter()).zip(align_grad.iter()) {
            *rv -= cfg.opt_rate * (g + ag);
        }
        let rn = norm2(&r);
        if rn > clamp_max {
            let scale = clamp_max / rn;
            for rv in r.iter_mut() {
                *rv *= scale;
            }
        }
    }

    let z: Vec<f64> = contexts
        .h_orig
        .iter()
        .zip(r.iter())
        .map(|(h, rv)| h + rv)
        .collect();
    Ok((r, z, trace))
}
