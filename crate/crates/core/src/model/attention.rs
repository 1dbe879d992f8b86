use crate::error::{Error, Result};
use crate::model::{LayerWeights, ModelConfig};
use crate::tensor::{softmax_in_place, Tensor};

/// Rotary position table: interleaved pairs `(2i, 2i+1)` of each head
/// rotate by `pos · theta^(-2i/d_head)`.
#[derive(Debug, Clone)]
pub struct Rope {
    half: usize,
    cos: Vec<f32>,
    sin: Vec<f32>,
}

impl Rope {
    pub fn new(d_head: usize, theta: f64, n_positions: usize) -> Self {
        let half = d_head / 2;
        let mut cos = Vec::with_capacity(n_positions * half);
        let mut sin = Vec::with_capacity(n_positions * half);
        for pos in 0..n_positions {
            for i in 0..half {
                let freq = theta.powf(-2.0 * i as f64 / d_head as f64);
                let angle = pos as f64 * freq;
                cos.push(angle.cos() as f32);
                sin.push(angle.sin() as f32);
            }
        }
        Rope { half, cos, sin }
    }

    pub fn for_config(cfg: &ModelConfig, n_positions: usize) -> Self {
        Rope::new(cfg.d_head, cfg.rope_theta, n_positions)
    }

    pub fn n_positions(&self) -> usize {
        self.cos.len().checked_div(self.half).unwrap_or(0)
    }

    /// Rotates one head vector in place; `inverse` applies the transpose.
    #[inline]
    pub fn rotate(&self, x: &mut [f32], pos: usize, inverse: bool) {
        let base = pos * self.half;
        let cos = &self.cos[base..base + self.half];
        let sin = &self.sin[base..base + self.half];
        for (i, pair) in x.chunks_exact_mut(2).enumerate() {
            let (c, s) = (cos[i], if inverse { -sin[i] } else { sin[i] });
            let (a, b) = (pair[0], pair[1]);
            pair[0] = a * c - b * s;
            pair[1] = a * s + b * c;
        }
    }

    /// Rotates every head of every row of an `S × (heads·d_head)` matrix.
    pub fn apply(&self, m: &mut Tensor, positions: &[usize], inverse: bool) {
        let d_head = 2 * self.half;
        for (s, &pos) in positions.iter().enumerate() {
            for head in m.row_mut(s).chunks_exact_mut(d_head) {
                self.rotate(head, pos, inverse);
            }
        }
    }
}

/// Causal scaled dot-product attention for one head.
///
/// `q`, `k`, `v` are `S × d_head` (already rotated). Returns the head output
/// and the `S × S` attention probabilities (zero above the diagonal).
pub fn causal_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
    if q.shape() != k.shape() || q.shape() != v.shape() || q.shape().len() != 2 {
        return Err(Error::Shape {
            op: "causal_attention",
            left: q.shape().to_vec(),
            right: k.shape().to_vec(),
        });
    }
    let (s_len, dh) = (q.rows(), q.cols());
    let scale = 1.0 / (dh as f32).sqrt();
    let mut probs = vec![0.0f32; s_len * s_len];
    let mut out = vec![0.0f32; s_len * dh];
    for i in 0..s_len {
        let qi = q.row(i);
        let p_row = &mut probs[i * s_len..i * s_len + i + 1];
        for (j, p) in p_row.iter_mut().enumerate() {
            *p = dot(qi, k.row(j)) * scale;
        }
        softmax_in_place(p_row);
        let o = &mut out[i * dh..(i + 1) * dh];
        for (j, &p) in p_row.iter().enumerate() {
            for (o, &vv) in o.iter_mut().zip(v.row(j)) {
                *o += p * vv;
            }
        }
    }
    Ok((
        Tensor::from_vec2(s_len, dh, out),
        Tensor::from_vec2(s_len, s_len, probs),
    ))
}

#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn default_positions(s_len: usize) -> Vec<usize> {
    (0..s_len).collect()
}

/// Output `h_n` of head `n` for input `x` (`S × d_model`).
pub fn attention_head(
    x: &Tensor,
    layer: &LayerWeights,
    cfg: &ModelConfig,
    n: usize,
    positions: &[usize],
) -> Result<Tensor> {
    if n >= layer.n_heads {
        return Err(Error::IndexOutOfRange {
            what: "head",
            index: n,
            len: layer.n_heads,
        });
    }
    check_positions(x, cfg, positions)?;
    let dh = cfg.d_head;
    let mut q = x.matmul(&layer.wq.column_block(n * dh, dh)?)?;
    let mut k = x.matmul(&layer.wk.column_block(n * dh, dh)?)?;
    let v = x.matmul(&layer.wv.column_block(n * dh, dh)?)?;
    let rope = Rope::for_config(cfg, positions.iter().max().map_or(0, |p| p + 1));
    rope.apply(&mut q, positions, false);
    rope.apply(&mut k, positions, false);
    Ok(causal_attention(&q, &k, &v)?.0)
}

fn check_positions(x: &Tensor, cfg: &ModelConfig, positions: &[usize]) -> Result<()> {
    if positions.len() != x.rows() {
        return Err(Error::InvalidArgument(format!(
            "{} positions for {} tokens",
            positions.len(),
            x.rows()
        )));
    }
    if x.rows() > cfg.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: x.rows(),
            max: cfg.max_seq_len,
        });
    }
    Ok(())
}

/// Rotated queries and keys plus values for all heads, each `S × (heads·d_head)`.
pub fn project_heads(
    x: &Tensor,
    layer: &LayerWeights,
    rope: &Rope,
    positions: &[usize],
) -> Result<(Tensor, Tensor, Tensor)> {
    let mut q = x.matmul(&layer.wq)?;
    let mut k = x.matmul(&layer.wk)?;
    let v = x.matmul(&layer.wv)?;
    rope.apply(&mut q, positions, false);
    rope.apply(&mut k, positions, false);
    Ok((q, k, v))
}

fn all_heads(x: &Tensor, layer: &LayerWeights, cfg: &ModelConfig) -> Result<Vec<Tensor>> {
    let positions = default_positions(x.rows());
    check_positions(x, cfg, &positions)?;
    let rope = Rope::for_config(cfg, x.rows());
    let (q, k, v) = project_heads(x, layer, &rope, &positions)?;
    let dh = cfg.d_head;
    (0..layer.n_heads)
        .map(|n| {
            let (qn, kn, vn) = (
                q.column_block(n * dh, dh)?,
                k.column_block(n * dh, dh)?,
                v.column_block(n * dh, dh)?,
            );
            Ok(causal_attention(&qn, &kn, &vn)?.0)
        })
        .collect()
}

/// `Concat(h_1, …, h_N) · W_O`.
pub fn mha_standard(x: &Tensor, layer: &LayerWeights, cfg: &ModelConfig) -> Result<Tensor> {
    let heads = all_heads(x, layer, cfg)?;
    Tensor::concat_columns(&heads)?.matmul(&layer.wo)
}

/// MHA output as a sum of per-head residual contributions `h_n · W_n`,
/// where `W_n` is the n-th `d_head`-row block of `W_O`.
pub fn mha_decomposed(
    x: &Tensor,
    layer: &LayerWeights,
    cfg: &ModelConfig,
) -> Result<(Tensor, Vec<Tensor>)> {
    let heads = all_heads(x, layer, cfg)?;
    let dh = cfg.d_head;
    let contribs = heads
        .iter()
        .enumerate()
        .map(|(n, h)| h.matmul(&layer.wo.row_block(n * dh, dh)?))
        .collect::<Result<Vec<_>>>()?;
    let mut output = contribs[0].zeros_like();
    for c in &contribs {
        output.add_assign(c)?;
    }
    Ok((output, contribs))
}
