//! Next-token training and post-pruning recovery.
//!
//! Gradients come from a hand-derived backward pass for the fixed
//! architecture. Each step samples `batch_tokens / seq_len` windows from
//! the corpus with a seeded RNG; per-window gradients are reduced in window
//! order, so a run is bit-reproducible for a given seed whatever the
//! worker count.

mod adam;
mod backward;

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{validate_tokens, ModelConfig, TokenId, TransformerWeights};
use crate::parallel;

pub use adam::Adam;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_tokens: usize,
    /// Window length; each window yields `seq_len - 1` predictions.
    pub seq_len: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Maximum global gradient norm.
    pub grad_clip: f64,
    pub seed: u64,
    /// Progress is logged every this many steps.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 500,
            batch_tokens: 1024,
            seq_len: 128,
            learning_rate: 3e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            seed: 0,
            eval_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return bad(format!("{name} {b} must lie in (0, 1)"));
            }
        }
        if !(self.adam_eps.is_finite() && self.adam_eps > 0.0 && self.grad_clip > 0.0) {
            return bad("adam_eps and grad_clip must be positive".into());
        }
        if self.seq_len < 2 || self.seq_len > model.max_seq_len {
            return bad(format!(
                "seq_len {} must lie in 2..={}",
                self.seq_len, model.max_seq_len
            ));
        }
        if self.batch_tokens < self.seq_len {
            return bad(format!(
                "batch_tokens {} smaller than seq_len {}",
                self.batch_tokens, self.seq_len
            ));
        }
        Ok(())
    }

    pub fn windows_per_step(&self) -> usize {
        (self.batch_tokens / self.seq_len).max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub tokens_seen: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<LossRecord>,
}

impl TrainLog {
    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss,tokens_seen\n");
        for r in &self.records {
            writeln!(out, "{},{},{}", r.step, r.loss, r.tokens_seen).expect("write to string");
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Seeded initialization: matrices `N(0, 1/fan_in)` with `fan_in` the row
/// count, norm gains 1.
pub fn init_weights(config: &ModelConfig, seed: u64) -> Result<TransformerWeights> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = TransformerWeights::zeros(config);
    for t in w.tensors_mut() {
        if t.shape().len() == 1 {
            continue;
        }
        let std = 1.0 / (t.rows() as f32).sqrt();
        for v in t.data_mut() {
            let z: f32 = StandardNormal.sample(&mut rng);
            *v = z * std;
        }
    }
    Ok(w)
}

/// Mean next-token cross-entropy over positions `1..S` and its gradient
/// with respect to every parameter.
pub fn loss_and_grads(w: &TransformerWeights, tokens: &[TokenId]) -> Result<(f64, TransformerWeights)> {
    w.validate()?;
    if tokens.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 tokens for a next-token loss, got {}",
            tokens.len()
        )));
    }
    validate_tokens(&w.config, tokens)?;
    let count = (tokens.len() - 1) as f64;
    let (nll, grads) = backward::sequence_grads(w, tokens, (1.0 / count) as f32)?;
    Ok((nll / count, grads))
}

/// Mean loss and gradient over several windows, reduced in window order.
pub fn batch_loss_and_grads(
    w: &TransformerWeights,
    windows: &[&[TokenId]],
) -> Result<(f64, TransformerWeights)> {
    let count: usize = windows.iter().map(|s| s.len().saturating_sub(1)).sum();
    if count == 0 {
        return Err(Error::InvalidArgument("batch has no predictions".into()));
    }
    let scale = (1.0 / count as f64) as f32;
    let parts = parallel::map(windows, |s| backward::sequence_grads(w, s, scale));
    let mut total = 0.0;
    let mut grads: Option<TransformerWeights> = None;
    for part in parts {
        let (nll, g) = part?;
        total += nll;
        match grads.as_mut() {
            None => grads = Some(g),
            Some(acc) => {
                for (a, b) in acc.tensors_mut().into_iter().zip(g.named_tensors()) {
                    a.add_assign(b.1)?;
                }
            }
        }
    }
    Ok((total / count as f64, grads.expect("non-empty batch")))
}

fn global_norm(g: &TransformerWeights) -> f64 {
    g.named_tensors()
        .iter()
        .flat_map(|(_, t)| t.data())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt()
}

/// Adam with global-norm clipping on seeded random corpus windows.
pub fn train(
    w: &TransformerWeights,
    corpus: &[TokenId],
    cfg: &TrainConfig,
) -> Result<(TransformerWeights, TrainLog)> {
    w.validate()?;
    cfg.validate(&w.config)?;
    let need = cfg.batch_tokens.max(cfg.seq_len);
    if corpus.len() < need {
        return Err(Error::CorpusTooShort {
            len: corpus.len(),
            need,
        });
    }
    if let Some((position, &id)) = corpus
        .iter()
        .enumerate()
        .find(|(_, &t)| t as usize >= w.config.vocab_size)
    {
        return Err(Error::TokenOutOfRange {
            id,
            position,
            vocab: w.config.vocab_size,
        });
    }

    let mut weights = w.clone();
    let mut opt = Adam::new(&weights, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = TrainLog::default();
    let n_windows = cfg.windows_per_step();
    let max_start = corpus.len() - cfg.seq_len;
    let mut tokens_seen = 0;
    for step in 1..=cfg.steps {
        let windows: Vec<&[TokenId]> = (0..n_windows)
            .map(|_| {
                let start = rng.random_range(0..=max_start);
                &corpus[start..start + cfg.seq_len]
            })
            .collect();
        let (loss, mut grads) = batch_loss_and_grads(&weights, &windows)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        let norm = global_norm(&grads);
        if !norm.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        if norm > cfg.grad_clip {
            let s = (cfg.grad_clip / norm) as f32;
            for t in grads.tensors_mut() {
                t.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
        opt.step(&mut weights, &grads);
        tokens_seen += n_windows * cfg.seq_len;
        log.records.push(LossRecord {
            step,
            loss,
            tokens_seen,
        });
        if cfg.eval_every > 0 && (step % cfg.eval_every == 0 || step == cfg.steps) {
            log::info!("step {step}/{} loss {loss:.4} grad_norm {norm:.3}", cfg.steps);
        }
    }
    Ok((weights, log))
}

/// Full-parameter fine-tuning of a pruned model; same machinery as [`train`].
pub fn recover(
    pruned: &TransformerWeights,
    corpus: &[TokenId],
    cfg: &TrainConfig,
) -> Result<(TransformerWeights, TrainLog)> {
    train(pruned, corpus, cfg)
}
