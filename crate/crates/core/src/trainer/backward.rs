//! Forward pass with saved activations and the matching analytic backward
//! pass for next-token cross-entropy.

use crate::error::Result;
use crate::model::forward::embed;
use crate::model::mlp::rms_norm_with_stats;
use crate::model::{causal_attention, project_heads, Rope, TokenId, TransformerWeights};
use crate::tensor::{sigmoid, silu, Tensor};

struct LayerActs {
    x_in: Tensor,
    inv1: Vec<f32>,
    xn1: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    probs: Vec<Tensor>,
    att: Tensor,
    x_mid: Tensor,
    inv2: Vec<f32>,
    xn2: Tensor,
    gate: Tensor,
    up: Tensor,
    hidden: Tensor,
}

/// Returns `(dx, dgain)` for `y = gain ⊙ x / rms(x)`.
fn rms_norm_backward(x: &Tensor, inv: &[f32], gain: &Tensor, dy: &Tensor) -> (Tensor, Tensor) {
    let d = x.cols();
    let mut dx = x.zeros_like();
    let mut dgain = vec![0.0f32; d];
    let g = gain.data();
    for (s, &r) in inv.iter().enumerate() {
        let (xr, dyr) = (x.row(s), dy.row(s));
        let mut dot = 0.0f32;
        for j in 0..d {
            let xhat = xr[j] * r;
            dgain[j] += dyr[j] * xhat;
            dot += dyr[j] * g[j] * xhat;
        }
        let mean = dot / d as f32;
        for (j, o) in dx.row_mut(s).iter_mut().enumerate() {
            let xhat = xr[j] * r;
            *o = r * (dyr[j] * g[j] - xhat * mean);
        }
    }
    (dx, Tensor::new(vec![d], dgain).expect("gain shape"))
}

/// Sum of next-token negative log-likelihoods over positions `0..S-1`
/// and gradients of `scale ×` that sum.
pub(crate) fn sequence_grads(
    w: &TransformerWeights,
    tokens: &[TokenId],
    scale: f32,
) -> Result<(f64, TransformerWeights)> {
    let cfg = &w.config;
    let s_len = tokens.len();
    let dh = cfg.d_head;
    let positions: Vec<usize> = (0..s_len).collect();
    let rope = Rope::for_config(cfg, s_len);

    let mut acts = Vec::with_capacity(w.layers.len());
    let mut x = embed(w, tokens);
    for layer in &w.layers {
        let (xn1, inv1) = rms_norm_with_stats(&x, &layer.attn_norm, cfg.rms_norm_eps)?;
        let (q, k, v) = project_heads(&xn1, layer, &rope, &positions)?;
        let mut heads = Vec::with_capacity(layer.n_heads);
        let mut probs = Vec::with_capacity(layer.n_heads);
        for n in 0..layer.n_heads {
            let (h, p) = causal_attention(
                &q.column_block(n * dh, dh)?,
                &k.column_block(n * dh, dh)?,
                &v.column_block(n * dh, dh)?,
            )?;
            heads.push(h);
            probs.push(p);
        }
        let att = Tensor::concat_columns(&heads)?;
        let x_mid = x.add(&att.matmul(&layer.wo)?)?;
        let (xn2, inv2) = rms_norm_with_stats(&x_mid, &layer.mlp_norm, cfg.rms_norm_eps)?;
        let gate = xn2.matmul(&layer.w_gate)?;
        let up = xn2.matmul(&layer.w_up)?;
        let hidden = gate.silu().mul(&up)?;
        let x_out = x_mid.add(&hidden.matmul(&layer.w_down)?)?;
        acts.push(LayerActs {
            x_in: x,
            inv1,
            xn1,
            q,
            k,
            v,
            probs,
            att,
            x_mid,
            inv2,
            xn2,
            gate,
            up,
            hidden,
        });
        x = x_out;
    }
    let (xf, inv_f) = rms_norm_with_stats(&x, &w.final_norm, cfg.rms_norm_eps)?;
    let logits = xf.matmul(&w.lm_head)?;

    // Cross-entropy; the last position has no target.
    let vocab = cfg.vocab_size;
    let mut nll = 0.0f64;
    let mut dlogits = Tensor::zeros(&[s_len, vocab]);
    for s in 0..s_len - 1 {
        let row = logits.row(s);
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let z: f64 = row.iter().map(|&l| (l as f64 - max).exp()).sum();
        let target = tokens[s + 1] as usize;
        nll += z.ln() + max - row[target] as f64;
        let d = dlogits.row_mut(s);
        for (j, o) in d.iter_mut().enumerate() {
            *o = ((row[j] as f64 - max).exp() / z) as f32 * scale;
        }
        d[target] -= scale;
    }

    let mut g = w.zeros_like();
    g.lm_head = xf.matmul_tn(&dlogits)?;
    let dxf = dlogits.matmul_nt(&w.lm_head)?;
    let (mut dx, dfinal) = rms_norm_backward(&x, &inv_f, &w.final_norm, &dxf);
    g.final_norm = dfinal;

    for (l, (layer, a)) in w.layers.iter().zip(&acts).enumerate().rev() {
        let gl = &mut g.layers[l];
        // MLP block: x_out = x_mid + (silu(gate) ⊙ up) · W_down
        gl.w_down = a.hidden.matmul_tn(&dx)?;
        let dhidden = dx.matmul_nt(&layer.w_down)?;
        let mut dgate = a.gate.zeros_like();
        let mut dup = a.up.zeros_like();
        for i in 0..dhidden.numel() {
            let (gv, uv, dh_) = (a.gate.data()[i], a.up.data()[i], dhidden.data()[i]);
            let sg = sigmoid(gv);
            dup.data_mut()[i] = dh_ * silu(gv);
            dgate.data_mut()[i] = dh_ * uv * sg * (1.0 + gv * (1.0 - sg));
        }
        gl.w_gate = a.xn2.matmul_tn(&dgate)?;
        gl.w_up = a.xn2.matmul_tn(&dup)?;
        let dxn2 = dgate.matmul_nt(&layer.w_gate)?.add(&dup.matmul_nt(&layer.w_up)?)?;
        let (dx_norm2, dmlp_norm) = rms_norm_backward(&a.x_mid, &a.inv2, &layer.mlp_norm, &dxn2);
        gl.mlp_norm = dmlp_norm;
        dx.add_assign(&dx_norm2)?;

        // Attention block: x_mid = x_in + concat(heads) · W_O
        gl.wo = a.att.matmul_tn(&dx)?;
        let datt = dx.matmul_nt(&layer.wo)?;
        let mut dq = a.q.zeros_like();
        let mut dk = a.k.zeros_like();
        let mut dv = a.v.zeros_like();
        let inv_sqrt = 1.0 / (dh as f32).sqrt();
        for n in 0..layer.n_heads {
            let qn = a.q.column_block(n * dh, dh)?;
            let kn = a.k.column_block(n * dh, dh)?;
            let vn = a.v.column_block(n * dh, dh)?;
            let dout = datt.column_block(n * dh, dh)?;
            let p = &a.probs[n];
            let dp = dout.matmul_nt(&vn)?;
            dv.write_column_block(n * dh, &p.matmul_tn(&dout)?)?;
            let mut dscores = Tensor::zeros(&[s_len, s_len]);
            for i in 0..s_len {
                let (pr, dpr) = (p.row(i), dp.row(i));
                let inner: f32 = (0..=i).map(|j| pr[j] * dpr[j]).sum();
                let ds = dscores.row_mut(i);
                for j in 0..=i {
                    ds[j] = pr[j] * (dpr[j] - inner) * inv_sqrt;
                }
            }
            dq.write_column_block(n * dh, &dscores.matmul(&kn)?)?;
            dk.write_column_block(n * dh, &dscores.matmul_tn(&qn)?)?;
        }
        rope.apply(&mut dq, &positions, true);
        rope.apply(&mut dk, &positions, true);
        gl.wq = a.xn1.matmul_tn(&dq)?;
        gl.wk = a.xn1.matmul_tn(&dk)?;
        gl.wv = a.xn1.matmul_tn(&dv)?;
        let dxn1 = dq
            .matmul_nt(&layer.wq)?
            .add(&dk.matmul_nt(&layer.wk)?)?
            .add(&dv.matmul_nt(&layer.wv)?)?;
        let (dx_norm1, dattn_norm) = rms_norm_backward(&a.x_in, &a.inv1, &layer.attn_norm, &dxn1);
        gl.attn_norm = dattn_norm;
        dx.add_assign(&dx_norm1)?;
    }

    let d = cfg.d_model;
    let emb = g.token_embedding.data_mut();
    for (s, &t) in tokens.iter().enumerate() {
        let row = &mut emb[t as usize * d..(t as usize + 1) * d];
        for (e, &v) in row.iter_mut().zip(dx.row(s)) {
            *e += v;
        }
    }
    Ok((nll, g))
}
