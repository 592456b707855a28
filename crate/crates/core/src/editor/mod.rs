//! The editing pipelines.
//!
//! Both methods share the same skeleton: extract prefix-averaged keys for
//! every fact at the last target layer, optimize one residual per fact so a
//! perturbed forward pass emits the new object, then spread each optimized
//! hidden-state gap across the target layers with one closed-form
//! least-squares weight update per layer.
//!
//! `Baseline` optimizes each residual against the prediction loss alone.
//! `Aligned` adds two structural terms while facts are processed in
//! sequence: a KL divergence pulling the distribution of residual-space
//! cosines toward the key-space cosines of earlier items, and a mean squared
//! error pinning the raw cosines on the strongest key neighbors. Both
//! methods run the identical code path; the baseline simply forces the two
//! alignment weights to zero, so a zero-weight aligned run is bit-identical
//! to a baseline run.

mod losses;
mod optimize;
mod run;

pub use losses::alignment_losses;
pub use optimize::optimize_residual;
pub use run::{distribute_residual, edit_prefixes, random_preserved_prompts, run_edit};

use crate::memory_model::{FactTriple, KeyRecord, MemoryError};
use crate::numerics::{DenseMatrix, NumericsError};
use crate::toy_lm::ModelError;
use alloc::vec::Vec;
use core::fmt;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EditMethod {
    Baseline,
    Aligned,
}

#[derive(Clone, Debug)]
pub struct EditorConfig {
    /// Layers whose W_out receives a delta, strictly increasing. The last
    /// one is the layer where residuals are optimized.
    pub target_layers: Vec<usize>,
    /// Preserved-covariance weight (lambda).
    pub lambda_weight: f64,
    pub lambda_kl: f64,
    pub lambda_mse: f64,
    /// Number of strongest key cosines pinned by the MSE term.
    pub top_m: usize,
    pub opt_steps: usize,
    pub opt_rate: f64,
    /// Random prefixes per fact, in addition to the always-present empty
    /// prefix.
    pub n_prefixes: usize,
    pub prefix_len: usize,
    /// Temperature of the exponential normalization of cosine sets.
    pub temperature: f64,
    /// Number of preserved prompts used for each layer covariance.
    pub covariance_samples: usize,
    /// Residual norm clamp, as a multiple of the anchor hidden-state norm.
    pub norm_clamp_factor: f64,
    /// Ridge passed to the solver; on factorization failure the run retries
    /// once with 1e-6 * trace(C_p + K K^T) / d.
    pub ridge: f64,
    pub seed: u64,
    pub method: EditMethod,
}

impl EditorConfig {
    /// Defaults for a model whose edited layers have key dimension `key_dim`.
    pub fn defaults_for_key_dim(key_dim: usize) -> Self {
        EditorConfig {
            target_layers: Vec::new(),
            lambda_weight: 10_000.0 * key_dim as f64 / 64.0,
            lambda_kl: 2.0,
            lambda_mse: 8.0,
            top_m: 50,
            opt_steps: 25,
            opt_rate: 0.5,
            n_prefixes: 5,
            prefix_len: 5,
            temperature: 0.1,
            covariance_samples: 1000,
            norm_clamp_factor: 4.0,
            ridge: 0.0,
            seed: 0,
            method: EditMethod::Baseline,
        }
    }

    /// Alignment weights after applying the method switch.
    pub fn effective_lambdas(&self) -> (f64, f64) {
        match self.method {
            EditMethod::Baseline => (0.0, 0.0),
            EditMethod::Aligned => (self.lambda_kl, self.lambda_mse),
        }
    }

    pub fn validate(&self, num_layers: usize) -> Result<(), EditError> {
        if self.target_layers.is_empty() {
            return Err(EditError::Config("target_layers must be nonempty"));
        }
        for w in self.target_layers.windows(2) {
            if w[1] <= w[0] {
                return Err(EditError::Config("target_layers must be strictly increasing"));
            }
        }
        if *self.target_layers.last().unwrap() >= num_layers {
            return Err(EditError::Config("target layer exceeds model depth"));
        }
        if self.top_m == 0 {
            return Err(EditError::Config("top_m must be >= 1"));
        }
        if self.opt_steps == 0 {
            return Err(EditError::Config("opt_steps must be >= 1"));
        }
        if !(self.temperature > 0.0) {
            return Err(EditError::Config("temperature must be > 0"));
        }
        if !(self.opt_rate > 0.0) || !self.opt_rate.is_finite() {
            return Err(EditError::Config("opt_rate must be positive and finite"));
        }
        if !(self.lambda_weight >= 0.0) {
            return Err(EditError::Config("lambda_weight must be >= 0"));
        }
        Ok(())
    }
}

/// Everything accumulated while editing a batch of facts.
#[derive(Clone, Debug)]
pub struct EditBatch {
    pub facts: Vec<FactTriple>,
    /// Prefix-averaged keys at the last target layer, one per fact.
    pub keys: Vec<KeyRecord>,
    /// Keys re-extracted per target layer during the update loop.
    pub layer_keys: Vec<(usize, Vec<KeyRecord>)>,
    /// Optimized residuals; entry i exists only after item i is optimized.
    pub residuals: Vec<Vec<f64>>,
    /// z_i = h_i + r_i, the target hidden states.
    pub z_targets: Vec<Vec<f64>>,
    /// Pairwise key cosines at the last target layer (unit diagonal).
    pub key_similarities: DenseMatrix,
}

impl EditBatch {
    pub fn empty() -> Self {
        EditBatch {
            facts: Vec::new(),
            keys: Vec::new(),
            layer_keys: Vec::new(),
            residuals: Vec::new(),
            z_targets: Vec::new(),
            key_similarities: DenseMatrix::zeros(0, 0),
        }
    }

    /// Keys as a key_dim x N matrix, fact order.
    pub fn key_matrix(&self) -> Result<DenseMatrix, NumericsError> {
        let cols: Vec<Vec<f64>> = self.keys.iter().map(|k| k.key.clone()).collect();
        DenseMatrix::from_columns(&cols)
    }

    /// Residuals as a hidden_dim x N matrix, fact order.
    pub fn residual_matrix(&self) -> Result<DenseMatrix, NumericsError> {
        DenseMatrix::from_columns(&self.residuals)
    }
}

/// One optimizer step of one fact. The KL and MSE entries are the weighted
/// contributions (lambda * loss), so ablated runs record exact zeros.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceStep {
    pub nll: f64,
    pub l_kl: f64,
    pub l_mse: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct EditResult {
    /// One delta per target layer, in target-layer order.
    pub deltas: Vec<(usize, DenseMatrix)>,
    /// Per-fact optimization traces with opt_steps entries each.
    pub traces: Vec<Vec<TraceStep>>,
    /// Filled by callers that time the run; excluded from the fingerprint.
    pub wall_seconds: f64,
    pub batch: EditBatch,
}

impl EditResult {
    pub fn empty() -> Self {
        EditResult {
            deltas: Vec::new(),
            traces: Vec::new(),
            wall_seconds: 0.0,
            batch: EditBatch::empty(),
        }
    }

    /// FNV-1a over every numeric output except wall-clock time.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bits: u64| {
            for shift in [0u32, 8, 16, 24, 32, 40, 48, 56] {
                h ^= (bits >> shift) & 0xff;
                h = h.wrapping_mul(0x1000_0000_01b3);
            }
        };
        for (layer, d) in &self.deltas {
            eat(*layer as u64);
            for v in d.as_slice() {
                eat(v.to_bits());
            }
        }
        for trace in &self.traces {
            for s in trace {
                eat(s.nll.to_bits());
                eat(s.l_kl.to_bits());
                eat(s.l_mse.to_bits());
                eat(s.total.to_bits());
            }
        }
        for r in &self.batch.residuals {
            for v in r {
                eat(v.to_bits());
            }
        }
        for z in &self.batch.z_targets {
            for v in z {
                eat(v.to_bits());
            }
        }
        for k in &self.batch.keys {
            for v in &k.key {
                eat(v.to_bits());
            }
        }
        h
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum EditError {
    Config(&'static str),
    Model(ModelError),
    Memory(MemoryError),
    Numerics(NumericsError),
    FactInvalid { index: usize },
    NonFiniteLoss { fact: usize, step: usize },
}

impl fmt::Display for EditError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EditError::Config(msg) => write!(f, "editor config: {msg}"),
            EditError::Model(e) => write!(f, "{e}"),
            EditError::Memory(e) => write!(f, "{e}"),
            EditError::Numerics(e) => write!(f, "{e}"),
            EditError::FactInvalid { index } => write!(f, "fact {index} failed validation"),
            EditError::NonFiniteLoss { fact, step } => {
                write!(f, "non-finite loss while optimizing fact {fact} at step {step}")
            }
        }
    }
}

impl From<ModelError> for EditError {
    fn from(e: ModelError) -> Self {
        EditError::Model(e)
    }
}

impl From<MemoryError> for EditError {
    fn from(e: MemoryError) -> Self {
        EditError::Memory(e)
    }
}

impl From<NumericsError> for EditError {
    fn from(e: NumericsError) -> Self {
        EditError::Numerics(e)
    }
}
