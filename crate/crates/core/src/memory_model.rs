//! Bridge between the toy model and the editing math: fact records,
//! prefix-averaged key extraction, preserved-covariance estimation, and
//! in-place application of weight deltas.

use crate::numerics::DenseMatrix;
use crate::toy_lm::{self, ModelError, ToyModel};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

/// One knowledge item: a subject, a relation rendered through surface
/// templates, the object the model currently produces, and the object the
/// edit should install. `prompt_tokens` is the edit-template rendering with
/// the subject placed immediately before the relation continuation, so
/// `subject_end` (the final subject-token position) is well defined.
#[derive(Clone, Debug, PartialEq)]
pub struct FactTriple {
    pub subject_tokens: Vec<usize>,
    pub relation_id: usize,
    pub template_id: usize,
    pub heldout_template_id: usize,
    pub original_object: usize,
    pub target_object: usize,
    pub cluster_id: usize,
    pub prompt_tokens: Vec<usize>,
    pub subject_end: usize,
    pub heldout_prompt_tokens: Vec<usize>,
    pub heldout_subject_end: usize,
}

impl FactTriple {
    pub fn validate(&self, vocab_size: usize) -> Result<(), MemoryError> {
        if self.target_object == self.original_object {
            return Err(MemoryError::BadFact("target object equals original object"));
        }
        if self.target_object >= vocab_size || self.original_object >= vocab_size {
            return Err(MemoryError::BadFact("object token exceeds vocab"));
        }
        for &t in self
            .prompt_tokens
            .iter()
            .chain(self.heldout_prompt_tokens.iter())
            .chain(self.subject_tokens.iter())
        {
            if t >= vocab_size {
                return Err(MemoryError::BadFact("prompt token exceeds vocab"));
            }
        }
        if self.subject_end >= self.prompt_tokens.len()
            || self.heldout_subject_end >= self.heldout_prompt_tokens.len()
        {
            return Err(MemoryError::BadFact("subject position outside prompt"));
        }
        Ok(())
    }
}

/// Prefix-averaged key for one fact at one layer.
#[derive(Clone, Debug)]
pub struct KeyRecord {
    pub fact_index: usize,
    pub layer: usize,
    pub key: Vec<f64>,
}

/// lambda-scaled second moment of keys sampled from untouched prompts.
#[derive(Clone, Debug)]
pub struct PreservedCovariance {
    pub matrix: DenseMatrix,
    pub lambda_weight: f64,
    pub sample_count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum MemoryError {
    Model(ModelError),
    EmptyPrefixes,
    EmptySamples,
    BadLambda,
    BadFact(&'static str),
    DeltaShape {
        expected_rows: usize,
        expected_cols: usize,
        rows: usize,
        cols: usize,
    },
    ZeroKey { fact_index: usize },
}

impl fmt::Display for MemoryError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MemoryError::Model(e) => write!(f, "model error: {e}"),
            MemoryError::EmptyPrefixes => write!(f, "prefix list is empty"),
            MemoryError::EmptySamples => write!(f, "covariance sample list is empty"),
            MemoryError::BadLambda => write!(f, "lambda weight must be >= 0 and finite"),
            MemoryError::BadFact(msg) => write!(f, "invalid fact: {msg}"),
            MemoryError::DeltaShape {
                expected_rows,
                expected_cols,
                rows,
                cols,
            } => write!(
                f,
                "delta shape {rows}x{cols} does not match W_out {expected_rows}x{expected_cols}"
            ),
            MemoryError::ZeroKey { fact_index } => {
                write!(f, "extracted key for fact {fact_index} has zero norm")
            }
        }
    }
}

impl From<ModelError> for MemoryError {
    fn from(e: ModelError) -> Self {
        MemoryError::Model(e)
    }
}

/// Tokens of `prefix` followed by the fact's edit-template prompt, plus the
/// key position (final subject token) within the combined sequence.
pub fn prefixed_prompt(fact: &FactTriple, prefix: &[usize]) -> (Vec<usize>, usize) {
    let mut tokens = Vec::with_capacity(prefix.len() + fact.prompt_tokens.len());
    tokens.extend_from_slice(prefix);
    tokens.extend_from_slice(&fact.prompt_tokens);
    (tokens, prefix.len() + fact.subject_end)
}

/// Arithmetic mean over prefixes of the key extracted at the final
/// subject-token position. The empty prefix counts as one prefix.
pub fn extract_averaged_key(
    model: &ToyModel,
    fact: &FactTriple,
    fact_index: usize,
    prefixes: &[Vec<usize>],
    layer: usize,
) -> Result<KeyRecord, MemoryError> {
    if prefixes.is_empty() {
        return Err(MemoryError::EmptyPrefixes);
    }
    let dk = model.cfg.key_dim();
    let mut mean = vec![0.0; dk];
    for prefix in prefixes {
        let (tokens, key_pos) = prefixed_prompt(fact, prefix);
        let key = toy_lm::extract_key(model, &tokens, layer, key_pos)?;
        for (m, k) in mean.iter_mut().zip(key.iter()) {
            *m += k;
        }
    }
    let inv = 1.0 / prefixes.len() as f64;
    for m in mean.iter_mut() {
        *m *= inv;
    }
    if mean.iter().all(|v| *v == 0.0) {
        return Err(MemoryError::ZeroKey { fact_index });
    }
    Ok(KeyRecord {
        fact_index,
        layer,
        key: mean,
    })
}

/// lambda * (1/n) * sum of k k^T over keys taken at the final position of
/// each sample prompt.
pub fn estimate_covariance(
    model: &ToyModel,
    sample_prompts: &[Vec<usize>],
    layer: usize,
    lambda_weight: f64,
) -> Result<PreservedCovariance, MemoryError> {
    if sample_prompts.is_empty() {
        return Err(MemoryError::EmptySamples);
    }
    if !(lambda_weight >= 0.0) || !lambda_weight.is_finite() {
        return Err(MemoryError::BadLambda);
    }
    let dk = model.cfg.key_dim();
    let mut acc = DenseMatrix::zeros(dk, dk);
    for prompt in sample_prompts {
        let key = toy_lm::extract_key(model, prompt, layer, prompt.len() - 1)?;
        let data = acc.as_mut_slice();
        for i in 0..dk {
            let ki = key[i];
            if ki == 0.0 {
                continue;
            }
            let row = &mut data[i * dk..(i + 1) * dk];
            for (r, &kj) in row.iter_mut().zip(key.iter()) {
                *r += ki * kj;
            }
        }
    }
    let scale = lambda_weight / sample_prompts.len() as f64;
    Ok(PreservedCovariance {
        matrix: acc.scale(scale),
        lambda_weight,
        sample_count: sample_prompts.len(),
    })
}

/// W_out at `layer` += delta; every other parameter is untouched.
pub fn apply_delta(
    model: &mut ToyModel,
    layer: usize,
    delta: &DenseMatrix,
) -> Result<(), MemoryError> {
    if layer >= model.cfg.num_layers {
        return Err(MemoryError::Model(ModelError::LayerOutOfRange {
            layer,
            num_layers: model.cfg.num_layers,
        }));
    }
    let h = model.cfg.hidden_dim;
    let dk = model.cfg.key_dim();
    if delta.rows() != h || delta.cols() != dk {
        return Err(MemoryError::DeltaShape {
            expected_rows: h,
            expected_cols: dk,
            rows: delta.rows(),
            cols: delta.cols(),
        });
    }
    for (w, d) in model.layers[layer]
        .w_out
        .iter_mut()
        .zip(delta.as_slice().iter())
    {
        *w += d;
    }
    Ok(())
}
