//! End-to-end batch edit: key preparation, sequential residual
//! optimization, and the per-layer closed-form weight updates.

use super::optimize::{build_contexts, optimize_residual_with_contexts};
use super::{EditBatch, EditError, EditResult, EditorConfig};
use crate::memory_model::{
    apply_delta, estimate_covariance, extract_averaged_key, FactTriple, KeyRecord,
};
use crate::numerics::{pairwise_cosine, solve_update, DenseMatrix, NumericsError, SimilaritySet};
use crate::rng::Rng;
use crate::toy_lm::{hidden_state, ToyModel};
use alloc::vec::Vec;

/// Even split of the remaining hidden-state gap over the target layers that
/// have not been updated yet (the current one included).
pub fn distribute_residual(
    z_i: &[f64],
    h_current: &[f64],
    layer_rank: usize,
    layers_remaining: usize,
) -> Result<Vec<f64>, EditError> {
    if layers_remaining == 0 {
        return Err(EditError::Config(
            "distribute_residual requires at least one remaining layer",
        ));
    }
    if z_i.len() != h_current.len() {
        let _ = layer_rank;
        return Err(EditError::Numerics(NumericsError::DimensionMismatch {
            context: "distribute_residual",
            expected: z_i.len(),
            actual: h_current.len(),
        }));
    }
    let inv = 1.0 / layers_remaining as f64;
    Ok(z_i
        .iter()
        .zip(h_current.iter())
        .map(|(z, h)| (z - h) * inv)
        .collect())
}

/// Per-fact prefix sets: the empty prefix plus `n_prefixes` random
/// sequences, regenerated per fact from the run seed.
pub fn edit_prefixes(cfg: &EditorConfig, vocab_size: usize, fact_index: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::with_capacity(cfg.n_prefixes + 1);
    out.push(Vec::new());
    let mut rng = Rng::new(cfg.seed).derive("edit-prefix", fact_index as u64);
    for _ in 0..cfg.n_prefixes {
        out.push(crate::dataset::noise_seq(&mut rng, cfg.prefix_len, vocab_size));
    }
    out
}

/// Preserved prompts drawn by callers that have no training corpus at hand:
/// plain random token sequences.
pub fn random_preserved_prompts(seed: u64, count: usize, vocab_size: usize, len: usize) -> Vec<Vec<usize>> {
    let mut rng = Rng::new(seed).derive("preserved-prompts", 0);
    (0..count)
        .map(|_| rng.token_seq(len, vocab_size))
        .collect()
}

/// Runs the whole edit on `model` in place. `preserved_prompts` supplies the
/// distribution whose keys the update must leave intact (the per-layer
/// covariance is estimated from `cfg.covariance_samples` of them).
///
/// On any error the model is restored bit-for-bit to its pre-call state.
pub fn run_edit(
    model: &mut ToyModel,
    facts: &[FactTriple],
    cfg: &EditorConfig,
    preserved_prompts: &[Vec<usize>],
) -> Result<EditResult, EditError> {
    if facts.is_empty() {
        return Ok(EditResult::empty());
    }
    let snapshot = model.clone();
    match run_edit_inner(model, facts, cfg, preserved_prompts) {
        Ok(result) => Ok(result),
        Err(e) => {
            *model = snapshot;
            Err(e)
        }
    }
}

fn run_edit_inner(
    model: &mut ToyModel,
    facts: &[FactTriple],
    cfg: &EditorConfig,
    preserved_prompts: &[Vec<usize>],
) -> Result<EditResult, EditError> {
    cfg.validate(model.cfg.num_layers)?;
    for (index, fact) in facts.iter().enumerate() {
        if fact.validate(model.cfg.vocab_size).is_err() {
            return Err(EditError::FactInvalid { index });
        }
    }
    if preserved_prompts.is_empty() && cfg.lambda_weight > 0.0 {
        return Err(EditError::Config(
            "preserved prompts required when lambda_weight > 0",
        ));
    }
    let last_layer = *cfg.target_layers.last().unwrap();
    let n = facts.len();

    // Key preparation: prefix-averaged keys at the last target layer, then
    // the pairwise cosine structure every alignment term reads.
    let prefixes: Vec<Vec<Vec<usize>>> = (0..n)
        .map(|i| edit_prefixes(cfg, model.cfg.vocab_size, i))
        .collect();
    let mut keys: Vec<KeyRecord> = Vec::with_capacity(n);
    for (i, fact) in facts.iter().enumerate() {
        keys.push(extract_averaged_key(model, fact, i, &prefixes[i], last_layer)?);
    }
    let key_cols: Vec<Vec<f64>> = keys.iter().map(|k| k.key.clone()).collect();
    let key_similarities = pairwise_cosine(&DenseMatrix::from_columns(&key_cols)?)?;

    let mut batch = EditBatch {
        facts: facts.to_vec(),
        keys,
        layer_keys: Vec::new(),
        residuals: Vec::new(),
        z_targets: Vec::new(),
        key_similarities,
    };

    // Sequential residual optimization; item i sees residuals j < i only.
    let mut traces = Vec::with_capacity(n);
    for (i, fact) in facts.iter().enumerate() {
        let contexts = build_contexts(model, fact, &prefixes[i], last_layer)?;
        let row_entries: Vec<(usize, f64)> = (0..i)
            .map(|j| (j, batch.key_similarities.at(i, j)))
            .collect();
        let p_k_row = SimilaritySet::try_new(i, row_entries).map_err(EditError::Numerics)?;
        let (r_i, z_i, trace) = optimize_residual_with_contexts(
            model,
            fact,
            &contexts,
            i,
            &batch.residuals,
            &p_k_row,
            cfg,
        )?;
        batch.residuals.push(r_i);
        batch.z_targets.push(z_i);
        traces.push(trace);
    }

    // Per-layer distribution: re-extract keys and hidden states with the
    // weights edited so far, close an even share of each remaining gap.
    let mut deltas = Vec::with_capacity(cfg.target_layers.len());
    let cov_prompts: &[Vec<usize>] = if preserved_prompts.len() > cfg.covariance_samples {
        &preserved_prompts[..cfg.covariance_samples]
    } else {
        preserved_prompts
    };
    for (rank, &layer) in cfg.target_layers.iter().enumerate() {
        let layers_remaining = cfg.target_layers.len() - rank;
        let c_p = if cfg.lambda_weight > 0.0 {
            estimate_covariance(model, cov_prompts, layer, cfg.lambda_weight)?.matrix
        } else {
            let dk = model.cfg.key_dim();
            DenseMatrix::zeros(dk, dk)
        };

        let mut layer_keys: Vec<KeyRecord> = Vec::with_capacity(n);
        let mut layer_residuals: Vec<Vec<f64>> = Vec::with_capacity(n);
        for (i, fact) in facts.iter().enumerate() {
            layer_keys.push(extract_averaged_key(model, fact, i, &prefixes[i], layer)?);
            let h_cur = hidden_state(model, &fact.prompt_tokens, last_layer, fact.subject_end)?;
            layer_residuals.push(distribute_residual(
                &batch.z_targets[i],
                &h_cur,
                rank,
                layers_remaining,
            )?);
        }
        let k_l = DenseMatrix::from_columns(
            &layer_keys.iter().map(|k| k.key.clone()).collect::<Vec<_>>(),
        )?;
        let r_l = DenseMatrix::from_columns(&layer_residuals)?;

        let delta = match solve_update(&c_p, &k_l, &r_l, cfg.ridge) {
            Ok(d) => d,
            Err(NumericsError::FactorizationFailed) if cfg.ridge == 0.0 => {
                // Retriable: raise the ridge once, scaled to the system.
                let gram = k_l.matmul_bt(&k_l)?;
                let retry = 1e-6 * (c_p.trace() + gram.trace()) / c_p.rows() as f64;
                solve_update(&c_p, &k_l, &r_l, retry)?
            }
            Err(e) => return Err(EditError::Numerics(e)),
        };
        apply_delta(model, layer, &delta)?;
        batch.layer_keys.push((layer, layer_keys));
        deltas.push((layer, delta));
    }

    Ok(EditResult {
        deltas,
        traces,
        wall_seconds: 0.0,
        batch,
    })
}
