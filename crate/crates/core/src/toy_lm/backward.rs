//! Exact reverse-mode gradients, written against the cached activations of
//! a forward pass. Two consumers: the trainer (gradients for every
//! parameter) and the residual optimizer (gradient with respect to an
//! injected hidden-state delta only).

use super::forward::{matvec_t_accum, LayerCache, ResumedPass};
use super::{ForwardPass, ModelError, Perturbation, ToyModel};
use crate::fmath;
use alloc::vec;
use alloc::vec::Vec;

/// Gradient accumulators mirroring every model tensor.
#[derive(Clone, Debug)]
pub struct ModelGrads {
    pub embed: Vec<f64>,
    pub layers: Vec<LayerGrads>,
    pub unembed: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct LayerGrads {
    pub w_q: Vec<f64>,
    pub w_k: Vec<f64>,
    pub w_v: Vec<f64>,
    pub w_o: Vec<f64>,
    pub w_in: Vec<f64>,
    pub w_out: Vec<f64>,
}

impl ModelGrads {
    pub fn zeros_like(model: &ToyModel) -> Self {
        ModelGrads {
            embed: vec![0.0; model.embed.len()],
            layers: model
                .layers
                .iter()
                .map(|l| LayerGrads {
                    w_q: vec![0.0; l.w_q.len()],
                    w_k: vec![0.0; l.w_k.len()],
                    w_v: vec![0.0; l.w_v.len()],
                    w_o: vec![0.0; l.w_o.len()],
                    w_in: vec![0.0; l.w_in.len()],
                    w_out: vec![0.0; l.w_out.len()],
                })
                .collect(),
            unembed: vec![0.0; model.unembed.len()],
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out: Vec<&mut Vec<f64>> = Vec::new();
        out.push(&mut self.embed);
        for l in self.layers.iter_mut() {
            out.push(&mut l.w_q);
            out.push(&mut l.w_k);
            out.push(&mut l.w_v);
            out.push(&mut l.w_o);
            out.push(&mut l.w_in);
            out.push(&mut l.w_out);
        }
        out.push(&mut self.unembed);
        out
    }
}

fn softmax_nll(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut probs: Vec<f64> = logits.iter().map(|&v| fmath::exp(v - max)).collect();
    let sum: f64 = probs.iter().sum();
    let inv = 1.0 / sum;
    for p in probs.iter_mut() {
        *p *= inv;
    }
    let nll = -fmath::ln(probs[target].max(1e-300));
    let mut dlogits = probs;
    dlogits[target] -= 1.0;
    (nll, dlogits)
}

/// Non-affine layer-norm backward: given n = (x - mu) * rstd and the
/// incoming gradient dn, accumulates dx into `out`.
fn layer_norm_backward(normed: &[f64], rstd: f64, dn: &[f64], out: &mut [f64]) {
    let h = normed.len() as f64;
    let mut mean_dn = 0.0;
    let mut mean_dn_n = 0.0;
    for (d, n) in dn.iter().zip(normed.iter()) {
        mean_dn += d;
        mean_dn_n += d * n;
    }
    mean_dn /= h;
    mean_dn_n /= h;
    for i in 0..normed.len() {
        out[i] += rstd * (dn[i] - mean_dn - normed[i] * mean_dn_n);
    }
}

/// Backward through the final layer norm and unembedding, from the
/// final-position logits gradient to the final-position stream gradient.
fn head_backward(
    model: &ToyModel,
    fin_normed: &[f64],
    fin_rstd: f64,
    dlogits: &[f64],
    mut grads: Option<&mut ModelGrads>,
) -> Vec<f64> {
    let h = model.cfg.hidden_dim;
    let mut d_normed = vec![0.0; h];
    matvec_t_accum(&model.unembed, dlogits, &mut d_normed);
    if let Some(g) = grads.as_deref_mut() {
        for (v, &dl) in dlogits.iter().enumerate() {
            if dl == 0.0 {
                continue;
            }
            let row = &mut g.unembed[v * h..(v + 1) * h];
            for (gw, &n) in row.iter_mut().zip(fin_normed.iter()) {
                *gw += dl * n;
            }
        }
    }
    let mut dx = vec![0.0; h];
    layer_norm_backward(fin_normed, fin_rstd, &d_normed, &mut dx);
    dx
}

/// Backward through one block. `dout` is the gradient of the loss with
/// respect to the block's output stream; returns the gradient with respect
/// to its input stream. When `grads` is provided, parameter gradients are
/// accumulated as well. Weight matrices are traversed row-by-row with all
/// positions in the inner loop, mirroring the forward pass.
fn block_backward(
    model: &ToyModel,
    l: usize,
    cache: &LayerCache,
    dout: &[f64],
    t_len: usize,
    mut grads: Option<&mut LayerGrads>,
) -> Vec<f64> {
    let h = model.cfg.hidden_dim;
    let dk = model.cfg.key_dim();
    let layer = &model.layers[l];
    let inv_sqrt_h = 1.0 / fmath::sqrt(h as f64);

    let mut dn = vec![0.0; t_len * h];

    // MLP path: dact = W_out^T dout, dpre = dact * silu', dn += W_in^T dpre.
    let mut dact = vec![0.0; t_len * dk];
    for i in 0..h {
        let row = &layer.w_out[i * dk..(i + 1) * dk];
        for t in 0..t_len {
            let gi = dout[t * h + i];
            let dst = &mut dact[t * dk..(t + 1) * dk];
            for (o, &wv) in dst.iter_mut().zip(row.iter()) {
                *o += gi * wv;
            }
        }
        if let Some(g) = grads.as_deref_mut() {
            let grow = &mut g.w_out[i * dk..(i + 1) * dk];
            for t in 0..t_len {
                let gi = dout[t * h + i];
                let act = &cache.key_act[t * dk..(t + 1) * dk];
                for (o, &a) in grow.iter_mut().zip(act.iter()) {
                    *o += gi * a;
                }
            }
        }
    }
    let mut dpre = dact;
    for idx in 0..t_len * dk {
        // silu'(x) = s (1 + x (1 - s)) with s = sigmoid(x) from the cache.
        let sgm = cache.key_sig[idx];
        dpre[idx] *= sgm * (1.0 + cache.key_pre[idx] * (1.0 - sgm));
    }
    for i in 0..dk {
        let row = &layer.w_in[i * h..(i + 1) * h];
        for t in 0..t_len {
            let gi = dpre[t * dk + i];
            let dst = &mut dn[t * h..(t + 1) * h];
            for (o, &wv) in dst.iter_mut().zip(row.iter()) {
                *o += gi * wv;
            }
        }
        if let Some(g) = grads.as_deref_mut() {
            let grow = &mut g.w_in[i * h..(i + 1) * h];
            for t in 0..t_len {
                let gi = dpre[t * dk + i];
                let n_t = &cache.normed[t * h..(t + 1) * h];
                for (o, &nv) in grow.iter_mut().zip(n_t.iter()) {
                    *o += gi * nv;
                }
            }
        }
    }

    // Attention path: dctx = W_o^T dout, then softmax and score backward.
    let mut dctx = vec![0.0; t_len * h];
    for i in 0..h {
        let row = &layer.w_o[i * h..(i + 1) * h];
        for t in 0..t_len {
            let gi = dout[t * h + i];
            let dst = &mut dctx[t * h..(t + 1) * h];
            for (o, &wv) in dst.iter_mut().zip(row.iter()) {
                *o += gi * wv;
            }
        }
        if let Some(g) = grads.as_deref_mut() {
            let grow = &mut g.w_o[i * h..(i + 1) * h];
            for t in 0..t_len {
                let gi = dout[t * h + i];
                let c_t = &cache.ctx[t * h..(t + 1) * h];
                for (o, &cv) in grow.iter_mut().zip(c_t.iter()) {
                    *o += gi * cv;
                }
            }
        }
    }

    let mut dq = vec![0.0; t_len * h];
    let mut dkey = vec![0.0; t_len * h];
    let mut dv = vec![0.0; t_len * h];
    let mut dw_row = vec![0.0; t_len];
    for t in 0..t_len {
        let dctx_t = &dctx[t * h..(t + 1) * h];
        let attw_row = &cache.attw[t * t_len..t * t_len + t + 1];
        let mut inner = 0.0;
        for u in 0..=t {
            let v_u = &cache.v[u * h..(u + 1) * h];
            let s = super::forward::dotp(dctx_t, v_u);
            dw_row[u] = s;
            inner += attw_row[u] * s;
            let dv_u = &mut dv[u * h..(u + 1) * h];
            let w = attw_row[u];
            for (o, &c) in dv_u.iter_mut().zip(dctx_t.iter()) {
                *o += w * c;
            }
        }
        let q_t = cache.q[t * h..(t + 1) * h].to_vec();
        let dq_t = &mut dq[t * h..(t + 1) * h];
        for u in 0..=t {
            let ds = attw_row[u] * (dw_row[u] - inner) * inv_sqrt_h;
            let k_u = &cache.k[u * h..(u + 1) * h];
            for (o, &kv) in dq_t.iter_mut().zip(k_u.iter()) {
                *o += ds * kv;
            }
            let dk_u = &mut dkey[u * h..(u + 1) * h];
            for (o, &qv) in dk_u.iter_mut().zip(q_t.iter()) {
                *o += ds * qv;
            }
        }
    }

    // Projections back to the normed input, plus their parameter grads.
    for i in 0..h {
        let wq_row = &layer.w_q[i * h..(i + 1) * h];
        let wk_row = &layer.w_k[i * h..(i + 1) * h];
        let wv_row = &layer.w_v[i * h..(i + 1) * h];
        for t in 0..t_len {
            let gq = dq[t * h + i];
            let gk = dkey[t * h + i];
            let gv = dv[t * h + i];
            let dst = &mut dn[t * h..(t + 1) * h];
            for (j, o) in dst.iter_mut().enumerate() {
                *o += gq * wq_row[j] + gk * wk_row[j] + gv * wv_row[j];
            }
        }
        if let Some(g) = grads.as_deref_mut() {
            for t in 0..t_len {
                let n_t = &cache.normed[t * h..(t + 1) * h];
                let gq = dq[t * h + i];
                let grow = &mut g.w_q[i * h..(i + 1) * h];
                for (o, &nv) in grow.iter_mut().zip(n_t.iter()) {
                    *o += gq * nv;
                }
                let gk = dkey[t * h + i];
                let grow = &mut g.w_k[i * h..(i + 1) * h];
                for (o, &nv) in grow.iter_mut().zip(n_t.iter()) {
                    *o += gk * nv;
                }
                let gv = dv[t * h + i];
                let grow = &mut g.w_v[i * h..(i + 1) * h];
                for (o, &nv) in grow.iter_mut().zip(n_t.iter()) {
                    *o += gv * nv;
                }
            }
        }
    }

    // Layer norm backward and the residual skip.
    let mut dx = dout.to_vec();
    for t in 0..t_len {
        layer_norm_backward(
            &cache.normed[t * h..(t + 1) * h],
            cache.rstd[t],
            &dn[t * h..(t + 1) * h],
            &mut dx[t * h..(t + 1) * h],
        );
    }
    dx
}

fn tail_delta_grad(
    model: &ToyModel,
    t_len: usize,
    start_block: usize,
    caches: &[LayerCache],
    fin_normed: &[f64],
    fin_rstd: f64,
    logits: &[f64],
    target: usize,
    pert_pos: usize,
) -> (f64, Vec<f64>) {
    let h = model.cfg.hidden_dim;
    let (nll, dlogits) = softmax_nll(logits, target);
    let d_last = head_backward(model, fin_normed, fin_rstd, &dlogits, None);
    let mut dstream = vec![0.0; t_len * h];
    dstream[(t_len - 1) * h..t_len * h].copy_from_slice(&d_last);
    for (i, cache) in caches.iter().enumerate().rev() {
        let l = start_block + i;
        dstream = block_backward(model, l, cache, &dstream, t_len, None);
    }
    let grad = dstream[pert_pos * h..(pert_pos + 1) * h].to_vec();
    (nll, grad)
}

/// Negative log-probability of `target` at the final position under the
/// perturbed forward pass, together with its exact gradient with respect to
/// the injected delta.
pub fn nll_and_grad(
    model: &ToyModel,
    tokens: &[usize],
    target: usize,
    p: &Perturbation,
) -> Result<(f64, Vec<f64>), ModelError> {
    if target >= model.cfg.vocab_size {
        return Err(ModelError::TokenOutOfRange {
            position: usize::MAX,
            token: target,
        });
    }
    let pass = super::forward::forward_with(model, tokens, Some(p))?;
    let t_len = tokens.len();
    let start = p.layer_index + 1;
    Ok(tail_delta_grad(
        model,
        t_len,
        start,
        &pass.caches[start..],
        &pass.fin_normed,
        pass.fin_rstd,
        &pass.logits,
        target,
        p.token_position,
    ))
}

/// Same as [`nll_and_grad`] but resumes from a cached clean pass, so blocks
/// upstream of the injection point are not recomputed. Bit-identical to the
/// full version.
pub fn nll_and_grad_resumed(
    model: &ToyModel,
    base: &ForwardPass,
    target: usize,
    p: &Perturbation,
) -> Result<(f64, Vec<f64>), ModelError> {
    if target >= model.cfg.vocab_size {
        return Err(ModelError::TokenOutOfRange {
            position: usize::MAX,
            token: target,
        });
    }
    let resumed: ResumedPass = super::forward::resume_with(model, base, p)?;
    Ok(tail_delta_grad(
        model,
        resumed.t_len,
        resumed.start_block,
        &resumed.caches,
        &resumed.fin_normed,
        resumed.fin_rstd,
        &resumed.logits,
        target,
        p.token_position,
    ))
}

/// Full-parameter backward for training: accumulates gradients of the NLL
/// of `target` at the final position into `grads` and returns the loss.
pub fn accumulate_param_grads(
    model: &ToyModel,
    pass: &ForwardPass,
    target: usize,
    grads: &mut ModelGrads,
) -> f64 {
    accumulate_param_grads_multi(model, pass, &[(pass.tokens.len() - 1, target)], grads)
}

/// As [`accumulate_param_grads`] but with a prediction target at several
/// positions: each `(position, token)` pair adds the NLL of `token` under
/// the logits read at `position`. Returns the mean loss over pairs.
pub fn accumulate_param_grads_multi(
    model: &ToyModel,
    pass: &ForwardPass,
    targets: &[(usize, usize)],
    grads: &mut ModelGrads,
) -> f64 {
    debug_assert!(!targets.is_empty());
    let h = model.cfg.hidden_dim;
    let t_len = pass.tokens.len();
    let last_stream = &pass.streams[model.cfg.num_layers];
    let mut dstream = vec![0.0; t_len * h];
    let mut nll_sum = 0.0;
    let inv = 1.0 / targets.len() as f64;
    let mut normed = vec![0.0; h];
    let mut head_logits = vec![0.0; model.cfg.vocab_size];
    for &(position, token) in targets {
        debug_assert!(position < t_len);
        let row = &last_stream[position * h..(position + 1) * h];
        let (_, rstd) = super::forward::layer_norm(row, &mut normed);
        super::forward::matvec_into(&model.unembed, &normed, &mut head_logits);
        let (nll, mut dlogits) = softmax_nll(&head_logits, token);
        nll_sum += nll;
        for d in dlogits.iter_mut() {
            *d *= inv;
        }
        let dx = head_backward(model, &normed, rstd, &dlogits, Some(grads));
        for (o, g) in dstream[position * h..(position + 1) * h]
            .iter_mut()
            .zip(dx.iter())
        {
            *o += g;
        }
    }
    for l in (0..model.cfg.num_layers).rev() {
        dstream = block_backward(
            model,
            l,
            &pass.caches[l],
            &dstream,
            t_len,
            Some(&mut grads.layers[l]),
        );
    }
    for (t, &tok) in pass.tokens.iter().enumerate() {
        let d = &dstream[t * h..(t + 1) * h];
        let e = &mut grads.embed[tok * h..(tok + 1) * h];
        for (o, &g) in e.iter_mut().zip(d.iter()) {
            *o += g;
        }
    }
    nll_sum * inv
}
