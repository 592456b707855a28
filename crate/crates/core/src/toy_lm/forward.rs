//! Forward passes: clean, perturbed, and resumed-from-cache.
//!
//! A resumed pass replays only the blocks downstream of a perturbation from
//! a cached clean pass; it runs the same block code on the same inputs, so
//! its outputs are bit-identical to a full perturbed forward.

use super::{ModelError, Perturbation, ToyModel, ATTN_DISTANCE_SLOPE};
use crate::fmath;
use alloc::vec;
use alloc::vec::Vec;

pub(crate) const LN_EPS: f64 = 1e-5;

/// Eight-lane dot product: fixed summation order, enough independent
/// accumulator chains to hide the multiply-add latency.
#[inline]
pub(crate) fn dotp(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let chunks = n / 8;
    let mut s = [0.0f64; 8];
    for c in 0..chunks {
        let i = c * 8;
        for l in 0..8 {
            s[l] += a[i + l] * b[i + l];
        }
    }
    let mut tail = 0.0;
    for i in chunks * 8..n {
        tail += a[i] * b[i];
    }
    ((s[0] + s[1]) + (s[2] + s[3])) + ((s[4] + s[5]) + (s[6] + s[7])) + tail
}

#[inline]
pub(crate) fn matvec_into(w: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (i, o) in out.iter_mut().enumerate() {
        *o = dotp(&w[i * cols..(i + 1) * cols], x);
    }
}

/// out[t, i] = w_row_i . x[t] for all positions at once; each weight row
/// is streamed from memory once per layer instead of once per position.
#[inline]
pub(crate) fn project_positions(
    w: &[f64],
    x: &[f64],
    t_len: usize,
    in_dim: usize,
    out_dim: usize,
    out: &mut [f64],
) {
    for i in 0..out_dim {
        let row = &w[i * in_dim..(i + 1) * in_dim];
        for t in 0..t_len {
            out[t * out_dim + i] = dotp(row, &x[t * in_dim..(t + 1) * in_dim]);
        }
    }
}

/// y += W^T g for row-major W (rows x cols): accumulates into cols-length y.
#[inline]
pub(crate) fn matvec_t_accum(w: &[f64], g: &[f64], y: &mut [f64]) {
    let cols = y.len();
    for (i, &gi) in g.iter().enumerate() {
        let row = &w[i * cols..(i + 1) * cols];
        for (o, &wv) in y.iter_mut().zip(row.iter()) {
            *o += gi * wv;
        }
    }
}

#[inline]
pub(crate) fn layer_norm(x: &[f64], out: &mut [f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mut mean = 0.0;
    for v in x {
        mean += v;
    }
    mean /= n;
    let mut var = 0.0;
    for v in x {
        let d = v - mean;
        var += d * d;
    }
    var /= n;
    let rstd = 1.0 / fmath::sqrt(var + LN_EPS);
    for (o, v) in out.iter_mut().zip(x.iter()) {
        *o = (v - mean) * rstd;
    }
    (mean, rstd)
}

#[derive(Clone, Debug)]
pub(crate) struct LayerCache {
    pub normed: Vec<f64>,
    pub rstd: Vec<f64>,
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    /// softmax attention weights, row t holds weights for u <= t
    pub attw: Vec<f64>,
    pub ctx: Vec<f64>,
    pub key_pre: Vec<f64>,
    /// sigmoid(key_pre), cached for the backward pass.
    pub key_sig: Vec<f64>,
    pub key_act: Vec<f64>,
}

/// Runs block `l` on input stream `x` (t_len x h), returning the output
/// stream and the activation cache.
pub(crate) fn run_block(
    model: &ToyModel,
    l: usize,
    x: &[f64],
    t_len: usize,
) -> (Vec<f64>, LayerCache) {
    let h = model.cfg.hidden_dim;
    let dk = model.cfg.key_dim();
    let layer = &model.layers[l];
    let inv_sqrt_h = 1.0 / fmath::sqrt(h as f64);

    let mut normed = vec![0.0; t_len * h];
    let mut rstd = vec![0.0; t_len];
    for t in 0..t_len {
        let (_, r) = layer_norm(&x[t * h..(t + 1) * h], &mut normed[t * h..(t + 1) * h]);
        rstd[t] = r;
    }

    let mut q = vec![0.0; t_len * h];
    let mut k = vec![0.0; t_len * h];
    let mut v = vec![0.0; t_len * h];
    project_positions(&layer.w_q, &normed, t_len, h, h, &mut q);
    project_positions(&layer.w_k, &normed, t_len, h, h, &mut k);
    project_positions(&layer.w_v, &normed, t_len, h, h, &mut v);

    let mut attw = vec![0.0; t_len * t_len];
    let mut ctx = vec![0.0; t_len * h];
    for t in 0..t_len {
        let q_t = &q[t * h..(t + 1) * h];
        let row = &mut attw[t * t_len..t * t_len + t + 1];
        let mut max = f64::NEG_INFINITY;
        for (u, w) in row.iter_mut().enumerate() {
            let k_u = &k[u * h..(u + 1) * h];
            *w = dotp(q_t, k_u) * inv_sqrt_h - ATTN_DISTANCE_SLOPE * (t - u) as f64;
            max = max.max(*w);
        }
        let mut sum = 0.0;
        for w in row.iter_mut() {
            *w = fmath::exp(*w - max);
            sum += *w;
        }
        let inv = 1.0 / sum;
        for w in row.iter_mut() {
            *w *= inv;
        }
        let c_t = &mut ctx[t * h..(t + 1) * h];
        for u in 0..=t {
            let w = attw[t * t_len + u];
            let v_u = &v[u * h..(u + 1) * h];
            for (c, &vv) in c_t.iter_mut().zip(v_u.iter()) {
                *c += w * vv;
            }
        }
    }

    let mut key_pre = vec![0.0; t_len * dk];
    let mut key_sig = vec![0.0; t_len * dk];
    let mut key_act = vec![0.0; t_len * dk];
    project_positions(&layer.w_in, &normed, t_len, h, dk, &mut key_pre);
    for ((a, s), &p) in key_act
        .iter_mut()
        .zip(key_sig.iter_mut())
        .zip(key_pre.iter())
    {
        *s = crate::fmath::sigmoid(p);
        *a = p * *s;
    }
    let mut attn_out = vec![0.0; t_len * h];
    project_positions(&layer.w_o, &ctx, t_len, h, h, &mut attn_out);
    let mut mlp_out = vec![0.0; t_len * h];
    project_positions(&layer.w_out, &key_act, t_len, dk, h, &mut mlp_out);
    let mut out = vec![0.0; t_len * h];
    for i in 0..t_len * h {
        out[i] = x[i] + attn_out[i] + mlp_out[i];
    }

    (
        out,
        LayerCache {
            normed,
            rstd,
            q,
            k,
            v,
            attw,
            ctx,
            key_pre,
            key_sig,
            key_act,
        },
    )
}

fn final_head(model: &ToyModel, last_stream_row: &[f64]) -> (Vec<f64>, f64, Vec<f64>) {
    let h = model.cfg.hidden_dim;
    let mut fin_normed = vec![0.0; h];
    let (_, fin_rstd) = layer_norm(last_stream_row, &mut fin_normed);
    let mut logits = vec![0.0; model.cfg.vocab_size];
    matvec_into(&model.unembed, &fin_normed, &mut logits);
    (fin_normed, fin_rstd, logits)
}

/// Full forward pass over all blocks, with an optional hidden-state
/// perturbation injected between blocks.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub tokens: Vec<usize>,
    /// streams[0] is the embedding stream; streams[l+1] is the residual
    /// stream after block l (with any perturbation already applied).
    pub(crate) streams: Vec<Vec<f64>>,
    pub(crate) caches: Vec<LayerCache>,
    pub(crate) fin_normed: Vec<f64>,
    pub(crate) fin_rstd: f64,
    /// Final-position logits.
    pub logits: Vec<f64>,
}

impl ForwardPass {
    /// Residual stream after block `layer` at `position`.
    pub fn hidden(&self, layer: usize, position: usize) -> &[f64] {
        let h = self.streams[layer + 1].len() / self.tokens.len();
        &self.streams[layer + 1][position * h..(position + 1) * h]
    }

    /// MLP key activation of block `layer` at `position`.
    pub fn key(&self, layer: usize, position: usize) -> &[f64] {
        let t_len = self.tokens.len();
        let dk = self.caches[layer].key_act.len() / t_len;
        &self.caches[layer].key_act[position * dk..(position + 1) * dk]
    }
}

pub fn forward_with(
    model: &ToyModel,
    tokens: &[usize],
    perturbation: Option<&Perturbation>,
) -> Result<ForwardPass, ModelError> {
    model.validate_tokens(tokens)?;
    if let Some(p) = perturbation {
        model.validate_perturbation(p, tokens.len())?;
    }
    let h = model.cfg.hidden_dim;
    let t_len = tokens.len();

    let mut stream0 = vec![0.0; t_len * h];
    for (t, &tok) in tokens.iter().enumerate() {
        let e = &model.embed[tok * h..(tok + 1) * h];
        stream0[t * h..(t + 1) * h].copy_from_slice(e);
    }

    let mut streams = Vec::with_capacity(model.cfg.num_layers + 1);
    streams.push(stream0);
    let mut caches = Vec::with_capacity(model.cfg.num_layers);
    for l in 0..model.cfg.num_layers {
        let (mut out, cache) = run_block(model, l, &streams[l], t_len);
        if let Some(p) = perturbation {
            if p.layer_index == l {
                let row = &mut out[p.token_position * h..(p.token_position + 1) * h];
                for (o, &d) in row.iter_mut().zip(p.delta.iter()) {
                    *o += d;
                }
            }
        }
        streams.push(out);
        caches.push(cache);
    }

    let last = &streams[model.cfg.num_layers][(t_len - 1) * h..t_len * h];
    let (fin_normed, fin_rstd, logits) = final_head(model, last);

    Ok(ForwardPass {
        tokens: tokens.to_vec(),
        streams,
        caches,
        fin_normed,
        fin_rstd,
        logits,
    })
}

/// Replays the blocks after `pert.layer_index` from a cached clean pass.
#[derive(Clone, Debug)]
pub struct ResumedPass {
    pub(crate) start_block: usize,
    pub(crate) t_len: usize,
    /// Residual stream after the final block.
    pub(crate) last_stream: Vec<f64>,
    pub(crate) caches: Vec<LayerCache>,
    pub(crate) fin_normed: Vec<f64>,
    pub(crate) fin_rstd: f64,
    pub logits: Vec<f64>,
}

impl ResumedPass {
    /// Final-block residual stream vector at `position`.
    pub fn last_hidden(&self, position: usize) -> &[f64] {
        let h = self.last_stream.len() / self.t_len;
        &self.last_stream[position * h..(position + 1) * h]
    }
}

pub fn resume_with(
    model: &ToyModel,
    base: &ForwardPass,
    pert: &Perturbation,
) -> Result<ResumedPass, ModelError> {
    let t_len = base.tokens.len();
    model.validate_perturbation(pert, t_len)?;
    let h = model.cfg.hidden_dim;
    let start_block = pert.layer_index + 1;

    let mut stream = base.streams[pert.layer_index + 1].clone();
    {
        let row = &mut stream[pert.token_position * h..(pert.token_position + 1) * h];
        for (o, &d) in row.iter_mut().zip(pert.delta.iter()) {
            *o += d;
        }
    }

    let mut caches = Vec::with_capacity(model.cfg.num_layers - start_block);
    for l in start_block..model.cfg.num_layers {
        let (out, cache) = run_block(model, l, &stream, t_len);
        stream = out;
        caches.push(cache);
    }

    let (fin_normed, fin_rstd, logits) = final_head(model, &stream[(t_len - 1) * h..t_len * h]);

    Ok(ResumedPass {
        start_block,
        t_len,
        last_stream: stream,
        caches,
        fin_normed,
        fin_rstd,
        logits,
    })
}

/// Residual stream vector after block `layer` at `position`, from a clean
/// forward pass.
pub fn hidden_state(
    model: &ToyModel,
    tokens: &[usize],
    layer: usize,
    position: usize,
) -> Result<Vec<f64>, ModelError> {
    if layer >= model.cfg.num_layers {
        return Err(ModelError::LayerOutOfRange {
            layer,
            num_layers: model.cfg.num_layers,
        });
    }
    model.validate_tokens(tokens)?;
    if position >= tokens.len() {
        return Err(ModelError::PositionOutOfRange {
            position,
            len: tokens.len(),
        });
    }
    let pass = forward_with(model, tokens, None)?;
    Ok(pass.hidden(layer, position).to_vec())
}

/// Post-nonlinearity MLP input activation of block `layer` at `position`,
/// length hidden_dim * ffn_expansion.
pub fn extract_key(
    model: &ToyModel,
    tokens: &[usize],
    layer: usize,
    position: usize,
) -> Result<Vec<f64>, ModelError> {
    if layer >= model.cfg.num_layers {
        return Err(ModelError::LayerOutOfRange {
            layer,
            num_layers: model.cfg.num_layers,
        });
    }
    model.validate_tokens(tokens)?;
    if position >= tokens.len() {
        return Err(ModelError::PositionOutOfRange {
            position,
            len: tokens.len(),
        });
    }
    let pass = forward_with(model, tokens, None)?;
    Ok(pass.key(layer, position).to_vec())
}

/// Final-position logits with `delta` added to the hidden state at
/// (layer_index, token_position) before subsequent layers run.
pub fn forward_perturbed(
    model: &ToyModel,
    tokens: &[usize],
    p: &Perturbation,
) -> Result<Vec<f64>, ModelError> {
    Ok(forward_with(model, tokens, Some(p))?.logits)
}

/// Final-position logits of a clean forward pass.
pub fn logits(model: &ToyModel, tokens: &[usize]) -> Result<Vec<f64>, ModelError> {
    Ok(forward_with(model, tokens, None)?.logits)
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in values.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::super::{build_model, ToyModelConfig};
    use super::*;
    use crate::rng::Rng;

    fn small_model() -> ToyModel {
        build_model(&ToyModelConfig {
            vocab_size: 17,
            hidden_dim: 8,
            num_layers: 3,
            seq_len_max: 10,
            ffn_expansion: 2,
            seed: 5,
        })
        .unwrap()
    }

    #[test]
    fn logits_have_vocab_length_and_are_deterministic() {
        let m = small_model();
        let toks = [3usize, 1, 4, 1, 5];
        let a = logits(&m, &toks).unwrap();
        let b = logits(&m, &toks).unwrap();
        assert_eq!(a.len(), 17);
        assert_eq!(a, b);
    }

    #[test]
    fn hidden_state_matches_forward_pass_and_has_hidden_len() {
        let m = small_model();
        let toks = [2usize, 9, 0];
        let pass = forward_with(&m, &toks, None).unwrap();
        for layer in 0..3 {
            for pos in 0..toks.len() {
                let h = hidden_state(&m, &toks, layer, pos).unwrap();
                assert_eq!(h.len(), 8);
                assert_eq!(h.as_slice(), pass.hidden(layer, pos));
            }
        }
    }

    #[test]
    fn extract_key_matches_manual_recomputation() {
        // key(layer) == silu(W_in * ln(hidden(layer - 1))).
        let m = small_model();
        let toks = [7usize, 2, 11, 3];
        for layer in 1..3 {
            for pos in 0..toks.len() {
                let key = extract_key(&m, &toks, layer, pos).unwrap();
                assert_eq!(key.len(), m.cfg.key_dim());
                let h = hidden_state(&m, &toks, layer - 1, pos).unwrap();
                let mut normed = vec![0.0; h.len()];
                layer_norm(&h, &mut normed);
                let mut pre = vec![0.0; m.cfg.key_dim()];
                matvec_into(&m.layers[layer].w_in, &normed, &mut pre);
                for (k, p) in key.iter().zip(pre.iter()) {
                    assert!((k - super::super::silu(*p)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn keys_respect_activation_range() {
        let m = small_model();
        let key = extract_key(&m, &[1, 2, 3, 4, 5], 1, 4).unwrap();
        for &v in &key {
            assert!(v >= super::super::SILU_MIN - 1e-12);
        }
    }

    #[test]
    fn zero_delta_leaves_logits_unchanged() {
        let m = small_model();
        let toks = [1usize, 8, 2, 2];
        let clean = logits(&m, &toks).unwrap();
        let p = Perturbation {
            layer_index: 1,
            token_position: 2,
            delta: vec![0.0; 8],
        };
        let perturbed = forward_perturbed(&m, &toks, &p).unwrap();
        assert_eq!(clean, perturbed);
    }

    #[test]
    fn perturbation_only_touches_downstream_state() {
        let m = small_model();
        let toks = [1usize, 8, 2, 2, 6];
        let mut delta = vec![0.0; 8];
        Rng::new(9).fill_normal(&mut delta, 1.0);
        let p = Perturbation {
            layer_index: 2,
            token_position: 4,
            delta,
        };
        let clean = forward_with(&m, &toks, None).unwrap();
        let pert = forward_with(&m, &toks, Some(&p)).unwrap();
        // States up to and including the pre-injection output of the last
        // block at other positions are identical.
        for layer in 0..2 {
            for pos in 0..toks.len() {
                assert_eq!(clean.hidden(layer, pos), pert.hidden(layer, pos));
            }
        }
        for pos in 0..4 {
            assert_eq!(clean.hidden(2, pos), pert.hidden(2, pos));
        }
        assert_ne!(clean.logits, pert.logits);
    }

    #[test]
    fn random_deltas_move_the_logits() {
        let m = small_model();
        let toks = [3usize, 3, 1, 12];
        let clean = logits(&m, &toks).unwrap();
        let mut rng = Rng::new(33);
        for _ in 0..100 {
            let mut delta = vec![0.0; 8];
            rng.fill_normal(&mut delta, 1.0);
            let p = Perturbation {
                layer_index: 1,
                token_position: 1,
                delta,
            };
            let pert = forward_perturbed(&m, &toks, &p).unwrap();
            let diff: f64 = clean
                .iter()
                .zip(pert.iter())
                .map(|(a, b)| (a - b).abs())
                .sum();
            assert!(diff > 0.0);
        }
    }

    #[test]
    fn resume_is_bit_identical_to_full_forward() {
        let m = small_model();
        let toks = [5usize, 6, 7, 8, 9, 1];
        let clean = forward_with(&m, &toks, None).unwrap();
        let mut rng = Rng::new(77);
        for layer in 0..3 {
            let mut delta = vec![0.0; 8];
            rng.fill_normal(&mut delta, 0.7);
            let p = Perturbation {
                layer_index: layer,
                token_position: 3,
                delta,
            };
            let full = forward_with(&m, &toks, Some(&p)).unwrap();
            let resumed = resume_with(&m, &clean, &p).unwrap();
            assert_eq!(full.logits, resumed.logits);
        }
    }

    #[test]
    fn contract_errors_fire() {
        let m = small_model();
        assert!(matches!(
            hidden_state(&m, &[1, 2], 9, 0),
            Err(ModelError::LayerOutOfRange { .. })
        ));
        assert!(matches!(
            hidden_state(&m, &[1, 2], 0, 5),
            Err(ModelError::PositionOutOfRange { .. })
        ));
        assert!(matches!(
            logits(&m, &[99]),
            Err(ModelError::TokenOutOfRange { .. })
        ));
        assert!(matches!(logits(&m, &[]), Err(ModelError::EmptySequence)));
    }
}
