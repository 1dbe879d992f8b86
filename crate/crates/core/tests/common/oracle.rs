//! Scalar-loop reference implementation of the forward pass and the
//! importance scores, in f64, sharing no code with the library kernels.

#![allow(clippy::needless_range_loop)]

use amprune::{TokenId, TransformerWeights};

type Mat = Vec<Vec<f64>>;

fn get(t: &amprune::Tensor, r: usize, c: usize) -> f64 {
    t.data()[r * t.cols() + c] as f64
}

fn matmul(x: &Mat, w: &amprune::Tensor) -> Mat {
    let (k, n) = (w.rows(), w.cols());
    x.iter()
        .map(|row| {
            let mut out = vec![0.0; n];
            for j in 0..n {
                let mut acc = 0.0;
                for i in 0..k {
                    acc += row[i] * get(w, i, j);
                }
                out[j] = acc;
            }
            out
        })
        .collect()
}

fn rms_norm(x: &Mat, weight: &amprune::Tensor, eps: f64) -> Mat {
    x.iter()
        .map(|row| {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            row.iter()
                .enumerate()
                .map(|(j, v)| v * inv * weight.data()[j] as f64)
                .collect()
        })
        .collect()
}

fn rope(v: &mut [f64], pos: usize, theta: f64) {
    let d = v.len();
    for i in 0..d / 2 {
        let angle = pos as f64 * theta.powf(-2.0 * i as f64 / d as f64);
        let (s, c) = angle.sin_cos();
        let (a, b) = (v[2 * i], v[2 * i + 1]);
        v[2 * i] = a * c - b * s;
        v[2 * i + 1] = a * s + b * c;
    }
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Per-layer `(head_scores, mlp_scores)` for one sequence plus final logits.
pub struct Reference {
    pub heads: Vec<Vec<f64>>,
    pub mlp: Vec<Vec<f64>>,
    pub logits: Mat,
}

pub fn reference(w: &TransformerWeights, tokens: &[TokenId]) -> Reference {
    let cfg = &w.config;
    let s_len = tokens.len();
    let d = cfg.d_model;
    let mut x: Mat = tokens
        .iter()
        .map(|&t| (0..d).map(|j| get(&w.token_embedding, t as usize, j)).collect())
        .collect();
    let (mut heads, mut mlp) = (Vec::new(), Vec::new());
    for layer in &w.layers {
        let dh = cfg.d_head;
        let h = rms_norm(&x, &layer.attn_norm, cfg.rms_norm_eps);
        let (mut q, mut k, v) = (matmul(&h, &layer.wq), matmul(&h, &layer.wk), matmul(&h, &layer.wv));
        for s in 0..s_len {
            for n in 0..layer.n_heads {
                rope(&mut q[s][n * dh..(n + 1) * dh], s, cfg.rope_theta);
                rope(&mut k[s][n * dh..(n + 1) * dh], s, cfg.rope_theta);
            }
        }
        let mut layer_heads = Vec::new();
        let mut attn = vec![vec![0.0; d]; s_len];
        for n in 0..layer.n_heads {
            let cols = n * dh..(n + 1) * dh;
            let mut l1 = 0.0;
            for s in 0..s_len {
                let mut scores: Vec<f64> = (0..=s)
                    .map(|t| {
                        cols.clone().map(|c| q[s][c] * k[t][c]).sum::<f64>() / (dh as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for p in scores.iter_mut() {
                    *p = (*p - m).exp();
                    z += *p;
                }
                let head_out: Vec<f64> = cols
                    .clone()
                    .map(|c| (0..=s).map(|t| scores[t] / z * v[t][c]).sum())
                    .collect();
                // This head's contribution to the block output: h_n · W_o[rows of n].
                for j in 0..d {
                    let mut acc = 0.0;
                    for (i, hv) in head_out.iter().enumerate() {
                        acc += hv * get(&layer.wo, n * dh + i, j);
                    }
                    l1 += acc.abs();
                    attn[s][j] += acc;
                }
            }
            layer_heads.push(l1 / s_len as f64);
        }
        for s in 0..s_len {
            for j in 0..d {
                x[s][j] += attn[s][j];
            }
        }
        let h = rms_norm(&x, &layer.mlp_norm, cfg.rms_norm_eps);
        let (g, u) = (matmul(&h, &layer.w_gate), matmul(&h, &layer.w_up));
        let act: Mat = (0..s_len)
            .map(|s| (0..layer.d_intermediate).map(|m| silu(g[s][m]) * u[s][m]).collect())
            .collect();
        let layer_mlp = (0..layer.d_intermediate)
            .map(|m| (0..s_len).map(|s| act[s][m].abs()).sum::<f64>() / s_len as f64)
            .collect();
        let down = matmul(&act, &layer.w_down);
        for s in 0..s_len {
            for j in 0..d {
                x[s][j] += down[s][j];
            }
        }
        heads.push(layer_heads);
        mlp.push(layer_mlp);
    }
    let h = rms_norm(&x, &w.final_norm, cfg.rms_norm_eps);
    Reference { heads, mlp, logits: matmul(&h, &w.lm_head) }
}

/// Mean of the per-sample scores, weighting each sample equally.
pub fn reference_scores(w: &TransformerWeights, calib: &[Vec<TokenId>]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let n = calib.len() as f64;
    let refs: Vec<Reference> = calib.iter().map(|t| reference(w, t)).collect();
    let mean = |pick: &dyn Fn(&Reference) -> &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        let first = pick(&refs[0]);
        first
            .iter()
            .enumerate()
            .map(|(l, layer)| {
                (0..layer.len())
                    .map(|i| refs.iter().map(|r| pick(r)[l][i]).sum::<f64>() / n)
                    .collect()
            })
            .collect()
    };
    (mean(&|r| &r.heads), mean(&|r| &r.mlp))
}
