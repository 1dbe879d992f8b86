//! Greedy decoding with a per-layer key/value cache.
//!
//! The decode step works on flat row buffers and never spawns workers, so
//! latency measurements reflect single-thread per-token compute.

use crate::error::{Error, Result};
use crate::model::attention::{dot, Rope};
use crate::model::forward::validate_tokens;
use crate::model::mlp::rms_scale;
use crate::model::{TokenId, TransformerWeights};
use crate::tensor::{gemm_row, silu, softmax_in_place, Tensor};

/// Keys and values seen so far, one buffer pair per layer.
#[derive(Debug, Clone)]
pub struct KvCache {
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    len: usize,
}

impl KvCache {
    pub fn new(w: &TransformerWeights, capacity: usize) -> Self {
        let widths: Vec<usize> = w
            .layers
            .iter()
            .map(|l| l.n_heads * w.config.d_head)
            .collect();
        KvCache {
            keys: widths.iter().map(|&c| Vec::with_capacity(c * capacity)).collect(),
            values: widths.iter().map(|&c| Vec::with_capacity(c * capacity)).collect(),
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

fn vec_mat(x: &[f32], m: &Tensor) -> Vec<f32> {
    let mut out = vec![0.0f32; m.cols()];
    gemm_row(x, m.data(), m.cols(), &mut out);
    out
}

fn norm_into(x: &[f32], gain: &Tensor, eps: f64, out: &mut [f32]) {
    let r = rms_scale(x, eps);
    for ((o, &v), &g) in out.iter_mut().zip(x).zip(gain.data()) {
        *o = v * r * g;
    }
}

/// Feeds one token at absolute position `cache.len()` and returns its logits.
pub(crate) fn decode_step(
    w: &TransformerWeights,
    token: TokenId,
    cache: &mut KvCache,
    rope: &Rope,
) -> Vec<f32> {
    let cfg = &w.config;
    let (d, dh) = (cfg.d_model, cfg.d_head);
    let pos = cache.len;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut x = w.token_embedding.row(token as usize).to_vec();
    let mut h = vec![0.0f32; d];
    let mut scores = Vec::with_capacity(pos + 1);
    for (l, layer) in w.layers.iter().enumerate() {
        norm_into(&x, &layer.attn_norm, cfg.rms_norm_eps, &mut h);
        let mut q = vec_mat(&h, &layer.wq);
        let mut k = vec_mat(&h, &layer.wk);
        let v = vec_mat(&h, &layer.wv);
        for head in q.chunks_exact_mut(dh) {
            rope.rotate(head, pos, false);
        }
        for head in k.chunks_exact_mut(dh) {
            rope.rotate(head, pos, false);
        }
        let width = q.len();
        cache.keys[l].extend_from_slice(&k);
        cache.values[l].extend_from_slice(&v);
        let (keys, values) = (&cache.keys[l], &cache.values[l]);
        let mut att = vec![0.0f32; width];
        for (n, out) in att.chunks_exact_mut(dh).enumerate() {
            let qn = &q[n * dh..(n + 1) * dh];
            scores.clear();
            for t in 0..=pos {
                let kt = &keys[t * width + n * dh..t * width + (n + 1) * dh];
                scores.push(dot(qn, kt) * scale);
            }
            softmax_in_place(&mut scores);
            for (t, &p) in scores.iter().enumerate() {
                let vt = &values[t * width + n * dh..t * width + (n + 1) * dh];
                for (o, &vv) in out.iter_mut().zip(vt) {
                    *o += p * vv;
                }
            }
        }
        let attn_out = vec_mat(&att, &layer.wo);
        for (xi, a) in x.iter_mut().zip(attn_out) {
            *xi += a;
        }

        norm_into(&x, &layer.mlp_norm, cfg.rms_norm_eps, &mut h);
        let mut hidden = vec_mat(&h, &layer.w_gate);
        let up = vec_mat(&h, &layer.w_up);
        for (g, u) in hidden.iter_mut().zip(up) {
            *g = silu(*g) * u;
        }
        let mlp_out = vec_mat(&hidden, &layer.w_down);
        for (xi, m) in x.iter_mut().zip(mlp_out) {
            *xi += m;
        }
    }
    cache.len += 1;
    norm_into(&x.clone(), &w.final_norm, cfg.rms_norm_eps, &mut x);
    vec_mat(&x, &w.lm_head)
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax(logits: &[f32]) -> TokenId {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best as TokenId
}

/// Greedy continuation of `prompt`; returns exactly `n_new` new tokens.
pub fn generate(w: &TransformerWeights, prompt: &[TokenId], n_new: usize) -> Result<Vec<TokenId>> {
    w.validate()?;
    validate_tokens(&w.config, prompt)?;
    let total = prompt.len() + n_new;
    if total > w.config.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: total,
            max: w.config.max_seq_len,
        });
    }
    if n_new == 0 {
        return Ok(Vec::new());
    }
    let rope = Rope::for_config(&w.config, total);
    let mut cache = KvCache::new(w, total);
    let mut logits = Vec::new();
    for &t in prompt {
        logits = decode_step(w, t, &mut cache, &rope);
    }
    let mut out = Vec::with_capacity(n_new);
    loop {
        let next = argmax(&logits);
        out.push(next);
        if out.len() == n_new {
            return Ok(out);
        }
        logits = decode_step(w, next, &mut cache, &rope);
    }
}
