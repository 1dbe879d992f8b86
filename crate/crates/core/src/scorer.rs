//! Activation-magnitude importance of attention heads and SwiGLU units.
//!
//! A head's score is the l1 norm of its residual contribution `h_n · W_n`
//! divided by the sample length. An MLP unit's score is the token-mean of
//! the absolute value of its down-projection input. Per-sample scores are
//! averaged with equal weight per calibration sample.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::fingerprint;
use crate::model::{forward_traced, TokenId, TransformerWeights};
use crate::parallel;
use crate::tensor::Tensor;

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerScores {
    pub head_scores: Vec<f64>,
    pub mlp_scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub version: u32,
    pub model_fingerprint: String,
    pub num_samples: usize,
    pub total_tokens: usize,
    /// How per-sample scores were combined; always `"sample_mean"`.
    pub aggregation: String,
    pub layers: Vec<LayerScores>,
}

impl ImportanceReport {
    /// Checks that every score vector has the width of the matching layer.
    pub fn check_matches(&self, w: &TransformerWeights) -> Result<()> {
        if self.layers.len() != w.layers.len() {
            return Err(Error::PlanMismatch(format!(
                "report has {} layers, model has {}",
                self.layers.len(),
                w.layers.len()
            )));
        }
        for (i, (s, l)) in self.layers.iter().zip(&w.layers).enumerate() {
            if s.head_scores.len() != l.n_heads || s.mlp_scores.len() != l.d_intermediate {
                return Err(Error::PlanMismatch(format!(
                    "layer {i}: report has {}/{} scores, model has {} heads and {} MLP units",
                    s.head_scores.len(),
                    s.mlp_scores.len(),
                    l.n_heads,
                    l.d_intermediate
                )));
            }
            let all = s.head_scores.iter().chain(&s.mlp_scores);
            if all.clone().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::NonFinite("importance scores"));
            }
        }
        Ok(())
    }
}

/// Per-head scores for one layer on one sample: `‖h_n W_n‖₁ / S`.
pub fn score_heads_layer(contribs: &[Tensor]) -> Result<Vec<f64>> {
    let first = contribs
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty head contribution list".into()))?;
    let s_len = first.rows() as f64;
    contribs
        .iter()
        .map(|c| {
            if c.shape() != first.shape() {
                return Err(Error::Shape {
                    op: "score_heads_layer",
                    left: first.shape().to_vec(),
                    right: c.shape().to_vec(),
                });
            }
            Ok(c.l1_norm() / s_len)
        })
        .collect()
}

/// Per-unit scores for one layer on one sample: `(1/S) Σ_s |a[s][m]|`.
pub fn score_mlp_layer(down_input: &Tensor) -> Vec<f64> {
    let (s_len, d_i) = (down_input.rows(), down_input.cols());
    let mut acc = vec![0.0f64; d_i];
    for row in down_input.data().chunks(d_i) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += (v as f64).abs();
        }
    }
    acc.iter_mut().for_each(|a| *a /= s_len as f64);
    acc
}

/// Scores of every layer for a single calibration sample.
pub fn score_sample(w: &TransformerWeights, tokens: &[TokenId]) -> Result<Vec<LayerScores>> {
    let mut layers = Vec::with_capacity(w.layers.len());
    forward_traced(w, tokens, |trace| {
        layers.push(LayerScores {
            head_scores: score_heads_layer(trace.head_contribs)?,
            mlp_scores: score_mlp_layer(trace.down_input),
        });
        Ok(())
    })?;
    Ok(layers)
}

/// Runs every calibration sample through the model and averages the
/// per-sample scores.
pub fn compute_importance(w: &TransformerWeights, calib: &[Vec<TokenId>]) -> Result<ImportanceReport> {
    w.validate()?;
    if calib.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    let max = w.config.max_seq_len;
    if let Some((index, s)) = calib
        .iter()
        .enumerate()
        .find(|(_, s)| s.is_empty() || s.len() > max)
    {
        return Err(Error::BadSample {
            index,
            len: s.len(),
            max,
        });
    }
    let per_sample = parallel::map(calib, |s| score_sample(w, s));

    let mut sum: Vec<LayerScores> = w
        .layers
        .iter()
        .map(|l| LayerScores {
            head_scores: vec![0.0; l.n_heads],
            mlp_scores: vec![0.0; l.d_intermediate],
        })
        .collect();
    for sample in per_sample {
        for (acc, s) in sum.iter_mut().zip(sample?) {
            acc.head_scores.iter_mut().zip(&s.head_scores).for_each(|(a, v)| *a += v);
            acc.mlp_scores.iter_mut().zip(&s.mlp_scores).for_each(|(a, v)| *a += v);
        }
    }
    let n = calib.len() as f64;
    for l in sum.iter_mut() {
        l.head_scores.iter_mut().chain(l.mlp_scores.iter_mut()).for_each(|v| *v /= n);
    }
    Ok(ImportanceReport {
        version: REPORT_VERSION,
        model_fingerprint: fingerprint(w)?,
        num_samples: calib.len(),
        total_tokens: calib.iter().map(Vec::len).sum(),
        aggregation: "sample_mean".into(),
        layers: sum,
    })
}
