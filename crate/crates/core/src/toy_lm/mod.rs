//! A small, deterministic, trainable autoregressive model.
//!
//! Each block mixes the residual stream with single-head causal attention
//! and an MLP, both reading the same layer-normed input:
//!
//! ```text
//!   n_t   = ln(x_t)
//!   a_t   = W_o * sum_u softmax_u(q_t . k_u / sqrt(h) - slope * (t - u)) v_u
//!   key_t = silu(W_in n_t)            (the addressable key of this block)
//!   m_t   = W_out key_t               (the memory written back)
//!   x'_t  = x_t + a_t + m_t
//! ```
//!
//! Facts are stored by the `W_out` projections: the edit pipeline rewrites
//! them so chosen keys map to new memories. The MLP nonlinearity is the
//! sigmoid-weighted linear unit, which keeps every loss surface smooth and
//! so keeps analytic gradients within finite-difference tolerance.
//!
//! Determinism: identical (config, seed) produce bit-identical parameters,
//! and identical inputs produce bit-identical activations.

mod backward;
mod forward;
mod train;

pub use backward::{accumulate_param_grads, nll_and_grad, nll_and_grad_resumed, ModelGrads};
pub use forward::{
    argmax, extract_key, forward_perturbed, forward_with, hidden_state, logits, resume_with,
    ForwardPass, ResumedPass,
};
pub use train::{recall, train_on_facts, train_with_options, TrainOptions, TrainReport};

use crate::fmath;
use crate::rng::Rng;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

/// Minimum value of silu(x) = x * sigmoid(x), attained near x = -1.2785.
pub const SILU_MIN: f64 = -0.278464542761074;

/// Fixed linear distance penalty on attention scores. Making position a
/// function of distance rather than absolute index keeps every prompt
/// representation shift-invariant, so memorized facts survive arbitrary
/// prepended context.
pub const ATTN_DISTANCE_SLOPE: f64 = 0.5;

/// Sigmoid-weighted linear unit, the MLP nonlinearity.
#[inline]
pub fn silu(x: f64) -> f64 {
    x * fmath::sigmoid(x)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyModelConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub seq_len_max: usize,
    pub ffn_expansion: usize,
    pub seed: u64,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        ToyModelConfig {
            vocab_size: 256,
            hidden_dim: 64,
            num_layers: 4,
            seq_len_max: 32,
            ffn_expansion: 4,
            seed: 0,
        }
    }
}

impl ToyModelConfig {
    /// Dimension of the MLP key space, i.e. the edited layer's input width.
    pub fn key_dim(&self) -> usize {
        self.hidden_dim * self.ffn_expansion
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.vocab_size == 0
            || self.hidden_dim == 0
            || self.num_layers == 0
            || self.seq_len_max == 0
            || self.ffn_expansion == 0
        {
            return Err(ModelError::BadConfig("all dimensions must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct LayerParams {
    pub w_q: Vec<f64>,
    pub w_k: Vec<f64>,
    pub w_v: Vec<f64>,
    pub w_o: Vec<f64>,
    /// key projection, key_dim x hidden, row-major
    pub w_in: Vec<f64>,
    /// memory projection, hidden x key_dim, row-major
    pub w_out: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ToyModel {
    pub cfg: ToyModelConfig,
    /// vocab x hidden
    pub embed: Vec<f64>,
    pub layers: Vec<LayerParams>,
    /// vocab x hidden
    pub unembed: Vec<f64>,
}

/// A hidden-state perturbation: `delta` is added to the residual stream
/// emitted by block `layer_index` at `token_position`, before any later
/// block runs.
#[derive(Clone, Debug)]
pub struct Perturbation {
    pub layer_index: usize,
    pub token_position: usize,
    pub delta: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ModelError {
    BadConfig(&'static str),
    TokenOutOfRange { position: usize, token: usize },
    SequenceTooLong { len: usize, max: usize },
    EmptySequence,
    LayerOutOfRange { layer: usize, num_layers: usize },
    PositionOutOfRange { position: usize, len: usize },
    DeltaShape { expected: usize, actual: usize },
    NonFiniteDelta,
    Diverged { epoch: usize, last_loss: f64 },
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::BadConfig(msg) => write!(f, "bad model config: {msg}"),
            ModelError::TokenOutOfRange { position, token } => {
                write!(f, "token {token} at position {position} exceeds vocab")
            }
            ModelError::SequenceTooLong { len, max } => {
                write!(f, "sequence length {len} exceeds maximum {max}")
            }
            ModelError::EmptySequence => write!(f, "empty token sequence"),
            ModelError::LayerOutOfRange { layer, num_layers } => {
                write!(f, "layer {layer} out of range for {num_layers} layers")
            }
            ModelError::PositionOutOfRange { position, len } => {
                write!(f, "position {position} out of range for length {len}")
            }
            ModelError::DeltaShape { expected, actual } => {
                write!(f, "delta length {actual} does not match hidden dim {expected}")
            }
            ModelError::NonFiniteDelta => write!(f, "perturbation delta has non-finite entries"),
            ModelError::Diverged { epoch, last_loss } => {
                write!(f, "training diverged at epoch {epoch}; last finite loss {last_loss}")
            }
        }
    }
}

/// Deterministically initialize a model from its config seed.
pub fn build_model(cfg: &ToyModelConfig) -> Result<ToyModel, ModelError> {
    cfg.validate()?;
    let h = cfg.hidden_dim;
    let dk = cfg.key_dim();
    let root = Rng::new(cfg.seed).derive("toy-lm-init", 0);

    let tensor = |tag: &str, idx: u64, len: usize, scale: f64| -> Vec<f64> {
        let mut rng = root.derive(tag, idx);
        let mut v = vec![0.0; len];
        rng.fill_normal(&mut v, scale);
        v
    };

    // Residual-writing projections start small so the embedding signal
    // dominates the stream early in training.
    let resid_scale = 0.2 / fmath::sqrt(2.0 * cfg.num_layers as f64);
    let attn_scale = 1.0 / fmath::sqrt(h as f64);
    let layers = (0..cfg.num_layers)
        .map(|l| LayerParams {
            w_q: tensor("w_q", l as u64, h * h, attn_scale),
            w_k: tensor("w_k", l as u64, h * h, attn_scale),
            w_v: tensor("w_v", l as u64, h * h, attn_scale),
            w_o: tensor("w_o", l as u64, h * h, attn_scale * resid_scale),
            w_in: tensor("w_in", l as u64, dk * h, attn_scale),
            w_out: tensor("w_out", l as u64, h * dk, resid_scale / fmath::sqrt(dk as f64)),
        })
        .collect();

    Ok(ToyModel {
        cfg: cfg.clone(),
        embed: tensor("embed", 0, cfg.vocab_size * h, 0.1),
        layers,
        unembed: tensor("unembed", 0, cfg.vocab_size * h, attn_scale),
    })
}

impl ToyModel {
    pub fn validate_tokens(&self, tokens: &[usize]) -> Result<(), ModelError> {
        if tokens.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        if tokens.len() > self.cfg.seq_len_max {
            return Err(ModelError::SequenceTooLong {
                len: tokens.len(),
                max: self.cfg.seq_len_max,
            });
        }
        for (position, &token) in tokens.iter().enumerate() {
            if token >= self.cfg.vocab_size {
                return Err(ModelError::TokenOutOfRange { position, token });
            }
        }
        Ok(())
    }

    pub(crate) fn validate_perturbation(
        &self,
        p: &Perturbation,
        seq_len: usize,
    ) -> Result<(), ModelError> {
        if p.layer_index >= self.cfg.num_layers {
            return Err(ModelError::LayerOutOfRange {
                layer: p.layer_index,
                num_layers: self.cfg.num_layers,
            });
        }
        if p.token_position >= seq_len {
            return Err(ModelError::PositionOutOfRange {
                position: p.token_position,
                len: seq_len,
            });
        }
        if p.delta.len() != self.cfg.hidden_dim {
            return Err(ModelError::DeltaShape {
                expected: self.cfg.hidden_dim,
                actual: p.delta.len(),
            });
        }
        if p.delta.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFiniteDelta);
        }
        Ok(())
    }

    /// All parameter tensors with stable names, in the fixed order used by
    /// checkpoints and checksums.
    pub fn named_tensors(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = Vec::new();
        out.push((String::from("embed"), self.embed.as_slice()));
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((alloc::format!("layer{l}.w_q"), layer.w_q.as_slice()));
            out.push((alloc::format!("layer{l}.w_k"), layer.w_k.as_slice()));
            out.push((alloc::format!("layer{l}.w_v"), layer.w_v.as_slice()));
            out.push((alloc::format!("layer{l}.w_o"), layer.w_o.as_slice()));
            out.push((alloc::format!("layer{l}.w_in"), layer.w_in.as_slice()));
            out.push((alloc::format!("layer{l}.w_out"), layer.w_out.as_slice()));
        }
        out.push((String::from("unembed"), self.unembed.as_slice()));
        out
    }

    /// Mutable access to a parameter tensor by its checkpoint name.
    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Vec<f64>> {
        if name == "embed" {
            return Some(&mut self.embed);
        }
        if name == "unembed" {
            return Some(&mut self.unembed);
        }
        let rest = name.strip_prefix("layer")?;
        let (idx, field) = rest.split_once('.')?;
        let l: usize = idx.parse().ok()?;
        let layer = self.layers.get_mut(l)?;
        match field {
            "w_q" => Some(&mut layer.w_q),
            "w_k" => Some(&mut layer.w_k),
            "w_v" => Some(&mut layer.w_v),
            "w_o" => Some(&mut layer.w_o),
            "w_in" => Some(&mut layer.w_in),
            "w_out" => Some(&mut layer.w_out),
            _ => None,
        }
    }

    /// FNV-1a over the exact bit patterns of every parameter.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bits: u64| {
            for shift in [0u32, 8, 16, 24, 32, 40, 48, 56] {
                h ^= (bits >> shift) & 0xff;
                h = h.wrapping_mul(0x1000_0000_01b3);
            }
        };
        for (_, t) in self.named_tensors() {
            for v in t {
                eat(v.to_bits());
            }
        }
        h
    }

    /// Per-tensor checksums, for verifying which tensors an edit touched.
    pub fn tensor_checksums(&self) -> Vec<(String, u64)> {
        self.named_tensors()
            .into_iter()
            .map(|(name, t)| {
                let mut h: u64 = 0xcbf2_9ce4_8422_2325;
                for v in t {
                    let bits = v.to_bits();
                    for shift in [0u32, 8, 16, 24, 32, 40, 48, 56] {
                        h ^= (bits >> shift) & 0xff;
                        h = h.wrapping_mul(0x1000_0000_01b3);
                    }
                }
                (name, h)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_builds_identical_models() {
        let cfg = ToyModelConfig {
            seed: 42,
            ..Default::default()
        };
        let a = build_model(&cfg).unwrap();
        let b = build_model(&cfg).unwrap();
        assert_eq!(a.checksum(), b.checksum());
    }

    #[test]
    fn different_seeds_differ() {
        let a = build_model(&ToyModelConfig {
            seed: 1,
            ..Default::default()
        })
        .unwrap();
        let b = build_model(&ToyModelConfig {
            seed: 2,
            ..Default::default()
        })
        .unwrap();
        assert_ne!(a.checksum(), b.checksum());
    }

    #[test]
    fn named_tensor_lookup_round_trips() {
        let mut m = build_model(&ToyModelConfig::default()).unwrap();
        let names: Vec<String> = m.named_tensors().into_iter().map(|(n, _)| n).collect();
        for n in names {
            assert!(m.tensor_mut(&n).is_some(), "missing tensor {n}");
        }
        assert!(m.tensor_mut("layer9.w_q").is_none());
    }

    #[test]
    fn silu_minimum_constant_is_tight() {
        let mut min = 0.0f64;
        let mut x = -4.0;
        while x < 2.0 {
            min = min.min(silu(x));
            x += 1e-4;
        }
        assert!((min - SILU_MIN).abs() < 1e-8);
    }
}
