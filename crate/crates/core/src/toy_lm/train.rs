//! Memorization training: next-token cross-entropy on templated fact
//! prompts, driving the original objects into the MLP memories.
//!
//! Each fact contributes one example per surface template (edit and
//! held-out), always predicting the original object at the final position.
//! Examples are optionally prepended with short random prefixes so the
//! memorized associations survive prepended context at evaluation time; the
//! loss itself is still only ever taken on templated fact prompts.

use super::backward::{accumulate_param_grads_multi, ModelGrads};
use super::forward::{argmax, forward_with, logits};
use super::{ModelError, ToyModel};
use crate::fmath;
use crate::memory_model::FactTriple;
use crate::rng::Rng;
use alloc::vec;
use alloc::vec::Vec;

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub epochs: usize,
    pub rate: f64,
    pub batch_size: usize,
    /// Probability of prepending a random prefix to a training example.
    pub prefix_augment_prob: f64,
    /// Longest augmentation prefix (clipped to the sequence budget).
    pub max_prefix_len: usize,
    /// First epoch at which augmentation applies; earlier epochs train on
    /// bare prompts so the associations form before contexts vary.
    pub augment_after: usize,
    /// Multiplier on the learning rate at the final epoch. The rate holds
    /// at `rate` until `augment_after`, then decays linearly to
    /// `rate * final_rate_factor` so the augmented phase consolidates.
    pub final_rate_factor: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 40,
            rate: 8e-3,
            batch_size: 32,
            prefix_augment_prob: 0.5,
            max_prefix_len: 20,
            augment_after: 0,
            final_rate_factor: 1.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    /// Mean next-token loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Top-1 recall of original objects on the edit-template prompts.
    pub final_recall: f64,
    pub examples: usize,
}

struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    fn new(model: &ToyModel) -> Self {
        let sizes: Vec<usize> = model.named_tensors().iter().map(|(_, t)| t.len()).collect();
        AdamState {
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            step: 0,
        }
    }
}

fn adam_update(model: &mut ToyModel, grads: &mut ModelGrads, state: &mut AdamState, rate: f64) {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;
    state.step += 1;
    let bc1 = 1.0 - libm::pow(B1, state.step as f64);
    let bc2 = 1.0 - libm::pow(B2, state.step as f64);
    let mut grad_tensors = grads.tensors_mut();
    // Parameter tensors in the same fixed order as the gradients.
    let names: Vec<alloc::string::String> =
        model.named_tensors().into_iter().map(|(n, _)| n).collect();
    for (i, name) in names.iter().enumerate() {
        let params = model.tensor_mut(name).expect("tensor name");
        let g = &mut grad_tensors[i];
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for j in 0..params.len() {
            let gj = g[j];
            m[j] = B1 * m[j] + (1.0 - B1) * gj;
            v[j] = B2 * v[j] + (1.0 - B2) * gj * gj;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            params[j] -= rate * mhat / (fmath::sqrt(vhat) + EPS);
            g[j] = 0.0;
        }
    }
}

/// Trains in place until the prompts predict their original objects.
/// Training is deterministic in (model seed, facts, options).
pub fn train_on_facts(
    model: &mut ToyModel,
    facts: &[FactTriple],
    epochs: usize,
    rate: f64,
) -> Result<TrainReport, ModelError> {
    train_with_options(
        model,
        facts,
        &TrainOptions {
            epochs,
            rate,
            ..TrainOptions::default()
        },
    )
}

pub fn train_with_options(
    model: &mut ToyModel,
    facts: &[FactTriple],
    opts: &TrainOptions,
) -> Result<TrainReport, ModelError> {
    for fact in facts {
        model.validate_tokens(&fact.prompt_tokens)?;
        model.validate_tokens(&fact.heldout_prompt_tokens)?;
        if fact.original_object >= model.cfg.vocab_size {
            return Err(ModelError::TokenOutOfRange {
                position: usize::MAX,
                token: fact.original_object,
            });
        }
    }
    // (prompt, subject_end, target) triples: both surface templates teach
    // the original object.
    let mut examples: Vec<(Vec<usize>, usize, usize)> = Vec::with_capacity(2 * facts.len());
    for f in facts {
        examples.push((f.prompt_tokens.clone(), f.subject_end, f.original_object));
        if f.heldout_prompt_tokens != f.prompt_tokens {
            examples.push((
                f.heldout_prompt_tokens.clone(),
                f.heldout_subject_end,
                f.original_object,
            ));
        }
    }

    let mut report = TrainReport {
        epoch_losses: Vec::with_capacity(opts.epochs),
        final_recall: 0.0,
        examples: examples.len(),
    };
    if examples.is_empty() || opts.epochs == 0 {
        report.final_recall = recall(model, facts)?;
        return Ok(report);
    }

    let root = Rng::new(model.cfg.seed).derive("train", 0);
    let mut adam = AdamState::new(model);
    let mut grads = ModelGrads::zeros_like(model);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut last_finite = f64::INFINITY;

    for epoch in 0..opts.epochs {
        let decay_span = opts.epochs.saturating_sub(opts.augment_after.min(opts.epochs));
        let frac = if epoch >= opts.augment_after && decay_span > 1 {
            (epoch - opts.augment_after) as f64 / (decay_span - 1) as f64
        } else {
            0.0
        };
        let epoch_rate = opts.rate * (1.0 - frac + frac * opts.final_rate_factor);
        let mut rng = root.derive("epoch", epoch as u64);
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(opts.batch_size.max(1)) {
            let mut batch_loss = 0.0;
            for &idx in chunk {
                let (prompt, subject_end, target) = &examples[idx];
                let tokens = if epoch >= opts.augment_after {
                    augment(prompt, &mut rng, model.cfg.seq_len_max, model.cfg.vocab_size, opts)
                } else {
                    prompt.clone()
                };
                let offset = tokens.len() - prompt.len();
                // Supervise every position from the final subject token on:
                // the relation continuation plus the object. The extra
                // next-token targets shape the attention routing; the loss
                // never leaves the templated prompt.
                let mut targets: Vec<(usize, usize)> = Vec::with_capacity(5);
                for p in (offset + subject_end)..tokens.len() - 1 {
                    targets.push((p, tokens[p + 1]));
                }
                // The object target enters twice: it is the association
                // being stored, the continuations are only routing hints.
                targets.push((tokens.len() - 1, *target));
                targets.push((tokens.len() - 1, *target));
                let pass = forward_with(model, &tokens, None)?;
                batch_loss += accumulate_param_grads_multi(model, &pass, &targets, &mut grads);
            }
            let scale = 1.0 / chunk.len() as f64;
            for t in grads.tensors_mut() {
                for g in t.iter_mut() {
                    *g *= scale;
                }
            }
            adam_update(model, &mut grads, &mut adam, epoch_rate);
            epoch_loss += batch_loss;
            seen += chunk.len();
        }
        let mean = epoch_loss / seen as f64;
        if !mean.is_finite() {
            return Err(ModelError::Diverged {
                epoch,
                last_loss: last_finite,
            });
        }
        last_finite = mean;
        report.epoch_losses.push(mean);
    }

    report.final_recall = recall(model, facts)?;
    Ok(report)
}

fn augment(
    prompt: &[usize],
    rng: &mut Rng,
    seq_len_max: usize,
    vocab_size: usize,
    opts: &TrainOptions,
) -> Vec<usize> {
    let budget = seq_len_max.saturating_sub(prompt.len());
    let max_len = opts.max_prefix_len.min(budget);
    if max_len == 0 || rng.next_f64() >= opts.prefix_augment_prob {
        return prompt.to_vec();
    }
    let len = 1 + rng.below(max_len);
    let mut out = crate::dataset::noise_seq(rng, len, vocab_size);
    out.extend_from_slice(prompt);
    out
}

/// Fraction of facts whose edit-template prompt greedily produces the
/// original object.
pub fn recall(model: &ToyModel, facts: &[FactTriple]) -> Result<f64, ModelError> {
    if facts.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for f in facts {
        let out = logits(model, &f.prompt_tokens)?;
        if argmax(&out) == f.original_object {
            hits += 1;
        }
    }
    Ok(hits as f64 / facts.len() as f64)
}
