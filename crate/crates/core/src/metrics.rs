//! Evaluation metrics over a (possibly edited) model: efficacy under
//! optional prefixes, generalization on held-out surface templates,
//! specificity on untouched neighbor facts, and an n-gram fluency score of
//! greedy rollouts.

use crate::fmath;
use crate::memory_model::FactTriple;
use crate::toy_lm::{argmax, logits, ModelError, ToyModel};
use alloc::collections::BTreeMap;
use alloc::vec::Vec;
use core::fmt;

#[derive(Clone, Debug, PartialEq)]
pub enum MetricsError {
    Model(ModelError),
    EmptyFacts,
    EmptyPrefixes,
    MissingHeldout { index: usize },
    NeighborOverlap { index: usize },
    RolloutTooShort { len: usize },
    EmptyPrompts,
}

impl fmt::Display for MetricsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricsError::Model(e) => write!(f, "{e}"),
            MetricsError::EmptyFacts => write!(f, "no facts to evaluate"),
            MetricsError::EmptyPrefixes => write!(f, "prefix list is empty; pass one empty prefix"),
            MetricsError::MissingHeldout { index } => {
                write!(f, "fact {index} has no held-out template rendering")
            }
            MetricsError::NeighborOverlap { index } => {
                write!(f, "neighbor fact {index} overlaps the edited set")
            }
            MetricsError::RolloutTooShort { len } => {
                write!(f, "rollout length {len} below the trigram minimum of 3")
            }
            MetricsError::EmptyPrompts => write!(f, "no rollout prompts"),
        }
    }
}

impl From<ModelError> for MetricsError {
    fn from(e: ModelError) -> Self {
        MetricsError::Model(e)
    }
}

/// Which object the greedy answer is compared against.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnswerTarget {
    Edited,
    Original,
}

fn answer(model: &ToyModel, prefix: &[usize], prompt: &[usize]) -> Result<usize, MetricsError> {
    let mut tokens = Vec::with_capacity(prefix.len() + prompt.len());
    tokens.extend_from_slice(prefix);
    tokens.extend_from_slice(prompt);
    // Long prefixes are truncated from the left to fit the context window.
    let max = model.cfg.seq_len_max;
    let view = if tokens.len() > max {
        &tokens[tokens.len() - max..]
    } else {
        &tokens[..]
    };
    Ok(argmax(&logits(model, view)?))
}

/// Fraction of (fact, prefix) pairs whose greedy final-position answer
/// matches the requested object.
pub fn answer_accuracy(
    model: &ToyModel,
    facts: &[FactTriple],
    prefixes: &[Vec<usize>],
    target: AnswerTarget,
) -> Result<f64, MetricsError> {
    if facts.is_empty() {
        return Err(MetricsError::EmptyFacts);
    }
    if prefixes.is_empty() {
        return Err(MetricsError::EmptyPrefixes);
    }
    let mut hits = 0usize;
    for fact in facts {
        let want = match target {
            AnswerTarget::Edited => fact.target_object,
            AnswerTarget::Original => fact.original_object,
        };
        for prefix in prefixes {
            if answer(model, prefix, &fact.prompt_tokens)? == want {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / (facts.len() * prefixes.len()) as f64)
}

/// Editing efficacy: greedy argmax equals the target object, averaged over
/// facts and the supplied prefixes (pass one empty prefix for the plain
/// metric).
pub fn efficacy(
    model: &ToyModel,
    facts: &[FactTriple],
    prefixes: &[Vec<usize>],
) -> Result<f64, MetricsError> {
    answer_accuracy(model, facts, prefixes, AnswerTarget::Edited)
}

/// Argmax-equals-target fraction over the held-out surface templates.
pub fn generalization(model: &ToyModel, facts: &[FactTriple]) -> Result<f64, MetricsError> {
    if facts.is_empty() {
        return Err(MetricsError::EmptyFacts);
    }
    let mut hits = 0usize;
    for (index, fact) in facts.iter().enumerate() {
        if fact.heldout_prompt_tokens.is_empty() {
            return Err(MetricsError::MissingHeldout { index });
        }
        if answer(model, &[], &fact.heldout_prompt_tokens)? == fact.target_object {
            hits += 1;
        }
    }
    Ok(hits as f64 / facts.len() as f64)
}

/// Fraction of neighbor facts whose greedy answer is unchanged between the
/// two models. Neighbors must be disjoint from the edited facts.
pub fn specificity(
    model_before: &ToyModel,
    model_after: &ToyModel,
    neighbor_facts: &[FactTriple],
    edited_facts: &[FactTriple],
) -> Result<f64, MetricsError> {
    if neighbor_facts.is_empty() {
        return Err(MetricsError::EmptyFacts);
    }
    for (index, n) in neighbor_facts.iter().enumerate() {
        if edited_facts
            .iter()
            .any(|e| e.prompt_tokens == n.prompt_tokens)
        {
            return Err(MetricsError::NeighborOverlap { index });
        }
    }
    let mut stable = 0usize;
    for n in neighbor_facts {
        let before = answer(model_before, &[], &n.prompt_tokens)?;
        let after = answer(model_after, &[], &n.prompt_tokens)?;
        if before == after {
            stable += 1;
        }
    }
    Ok(stable as f64 / neighbor_facts.len() as f64)
}

/// Empirical n-gram entropies of a token sequence, in bits.
pub fn ngram_entropies(tokens: &[usize]) -> (f64, f64) {
    let entropy = |n: usize| -> f64 {
        if tokens.len() < n {
            return 0.0;
        }
        let mut counts: BTreeMap<&[usize], usize> = BTreeMap::new();
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
        let total = (tokens.len() - n + 1) as f64;
        let mut h = 0.0;
        for &c in counts.values() {
            let p = c as f64 / total;
            h -= p * fmath::log2(p);
        }
        h
    };
    (entropy(2), entropy(3))
}

/// Repetition score of one sequence:
/// -(2/3) sum g2 log2 g2 + (4/3) sum g3 log2 g3, i.e. (2/3) H2 - (4/3) H3.
/// The sign asymmetry between the bigram and trigram terms is kept exactly
/// as the metric is defined; a single repeated token scores 0.
pub fn ngram_score(tokens: &[usize]) -> f64 {
    let (h2, h3) = ngram_entropies(tokens);
    (2.0 / 3.0) * h2 - (4.0 / 3.0) * h3
}

/// Greedy rollout of `rollout_len` tokens from each prompt (sliding the
/// context window when needed), scored by [`ngram_score`] and averaged.
pub fn fluency(
    model: &ToyModel,
    prompts: &[Vec<usize>],
    rollout_len: usize,
) -> Result<f64, MetricsError> {
    if rollout_len < 3 {
        return Err(MetricsError::RolloutTooShort { len: rollout_len });
    }
    if prompts.is_empty() {
        return Err(MetricsError::EmptyPrompts);
    }
    let max = model.cfg.seq_len_max;
    let mut total = 0.0;
    for prompt in prompts {
        let mut context = prompt.clone();
        let mut generated = Vec::with_capacity(rollout_len);
        for _ in 0..rollout_len {
            let view = if context.len() > max {
                &context[context.len() - max..]
            } else {
                &context[..]
            };
            let next = argmax(&logits(model, view)?);
            generated.push(next);
            context.push(next);
        }
        total += ngram_score(&generated);
    }
    Ok(total / prompts.len() as f64)
}

/// One evaluated cell of an experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub efficacy: f64,
    pub generalization: f64,
    pub specificity: f64,
    pub fluency: f64,
    pub misalignment_sum: f64,
    pub config_fingerprint: u64,
    pub seed: u64,
}

impl MetricsRecord {
    pub fn fractions_in_range(&self) -> bool {
        let frac = |v: f64| (0.0..=1.0).contains(&v);
        frac(self.efficacy)
            && frac(self.generalization)
            && frac(self.specificity)
            && self.misalignment_sum >= 0.0
    }
}
