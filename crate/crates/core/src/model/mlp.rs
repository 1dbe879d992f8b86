use crate::error::{Error, Result};
use crate::model::LayerWeights;
use crate::tensor::{silu, Tensor};

/// Row-wise RMSNorm followed by an elementwise gain.
pub fn rms_norm(x: &Tensor, weight: &Tensor, eps: f64) -> Result<Tensor> {
    Ok(rms_norm_with_stats(x, weight, eps)?.0)
}

/// RMSNorm that also returns `1/rms` per row for the backward pass.
pub(crate) fn rms_norm_with_stats(
    x: &Tensor,
    weight: &Tensor,
    eps: f64,
) -> Result<(Tensor, Vec<f32>)> {
    let d = x.cols();
    if weight.numel() != d || x.shape().len() != 2 {
        return Err(Error::Shape {
            op: "rms_norm",
            left: x.shape().to_vec(),
            right: weight.shape().to_vec(),
        });
    }
    let mut out = x.clone();
    let mut inv = Vec::with_capacity(x.rows());
    for row in out.data_mut().chunks_mut(d) {
        let r = rms_scale(row, eps);
        for (v, &g) in row.iter_mut().zip(weight.data()) {
            *v *= r * g;
        }
        inv.push(r);
    }
    Ok((out, inv))
}

#[inline]
pub(crate) fn rms_scale(row: &[f32], eps: f64) -> f32 {
    let ms = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / row.len() as f64;
    (1.0 / (ms + eps).sqrt()) as f32
}

/// `(SiLU(x·W_gate) ⊙ (x·W_up)) · W_down`.
///
/// With `capture`, also returns the down-projection input (`S × d_i`).
pub fn swiglu_mlp(
    x: &Tensor,
    layer: &LayerWeights,
    capture: bool,
) -> Result<(Tensor, Option<Tensor>)> {
    let gate = x.matmul(&layer.w_gate)?;
    let up = x.matmul(&layer.w_up)?;
    let mut hidden = gate;
    for (g, &u) in hidden.data_mut().iter_mut().zip(up.data()) {
        *g = silu(*g) * u;
    }
    let out = hidden.matmul(&layer.w_down)?;
    Ok((out, capture.then_some(hidden)))
}
