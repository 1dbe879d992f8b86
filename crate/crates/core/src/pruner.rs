//! Pruning plans and weight surgery.
//!
//! A plan lists, per layer, the heads and SwiGLU units to delete. Applying
//! it slices the projection matrices; nothing is masked, so the pruned
//! model is a smaller dense model.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LayerWeights, TransformerWeights};
use crate::scorer::ImportanceReport;

pub const PLAN_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Remove the lowest-scoring structures.
    Amp,
    /// Remove a seeded uniform sample.
    Random,
    /// Remove the highest-scoring structures.
    Reversed,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Amp => "amp",
            Strategy::Random => "random",
            Strategy::Reversed => "reversed",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum RatioBasis {
    /// The ratio is the fraction of heads and units removed in every layer.
    PerLayer,
    /// The ratio is the fraction of all model parameters removed.
    Overall,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub heads: Vec<usize>,
    pub mlp: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruningPlan {
    pub version: u32,
    pub model_fingerprint: String,
    pub strategy: Strategy,
    pub ratio_basis: RatioBasis,
    pub requested_ratio: f64,
    pub per_layer_fraction: f64,
    pub seed: Option<u64>,
    /// `1 − Q/P` with embeddings and output head counted in both.
    pub achieved_overall_ratio: f64,
    pub achieved_ratio_excluding_embeddings: f64,
    pub layers: Vec<LayerPlan>,
}

#[derive(Debug, Clone, Copy)]
pub struct PlanOptions {
    pub ratio: f64,
    pub basis: RatioBasis,
    pub strategy: Strategy,
    pub seed: Option<u64>,
}

/// How many of `n_items` to remove: round-half-up, keeping at least one.
pub fn per_layer_count(n_items: usize, fraction: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::InvalidArgument(format!(
            "pruning fraction {fraction} outside [0, 1)"
        )));
    }
    if n_items == 0 {
        return Err(Error::InvalidArgument("cannot prune an empty component".into()));
    }
    let count = (n_items as f64 * fraction + 0.5).floor() as usize;
    Ok(count.min(n_items - 1))
}

/// Parameters freed by removing `heads` heads and `units` MLP units.
fn removed_params(d_model: usize, d_head: usize, heads: usize, units: usize) -> usize {
    heads * 4 * d_model * d_head + units * 3 * d_model
}

/// Indices to remove under `strategy`; ties go to the lower index first.
fn select(scores: &[f64], count: usize, strategy: Strategy, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut picked = match strategy {
        Strategy::Random => rand::seq::index::sample(rng, scores.len(), count).into_vec(),
        Strategy::Amp | Strategy::Reversed => {
            let mut order: Vec<usize> = (0..scores.len()).collect();
            order.sort_by(|&a, &b| {
                let by_score = scores[a].total_cmp(&scores[b]);
                let by_score = if strategy == Strategy::Reversed {
                    by_score.reverse()
                } else {
                    by_score
                };
                by_score.then(a.cmp(&b))
            });
            order.truncate(count);
            order
        }
    };
    picked.sort_unstable();
    picked
}

pub fn build_plan(
    w: &TransformerWeights,
    report: &ImportanceReport,
    opts: PlanOptions,
) -> Result<PruningPlan> {
    w.validate()?;
    report.check_matches(w)?;
    if !(0.0..1.0).contains(&opts.ratio) {
        return Err(Error::InvalidArgument(format!(
            "ratio {} outside [0, 1)",
            opts.ratio
        )));
    }
    if opts.strategy == Strategy::Random && opts.seed.is_none() {
        return Err(Error::InvalidArgument("random strategy requires a seed".into()));
    }
    let cfg = &w.config;
    let total = w.param_count() as f64;
    let fraction = match opts.basis {
        RatioBasis::PerLayer => opts.ratio,
        RatioBasis::Overall => {
            let max_removed: usize = w
                .layers
                .iter()
                .map(|l| removed_params(cfg.d_model, cfg.d_head, l.n_heads - 1, l.d_intermediate - 1))
                .sum();
            let max_achievable = max_removed as f64 / total;
            let f = opts.ratio * total / w.prunable_param_count() as f64;
            if opts.ratio > max_achievable || f >= 1.0 {
                return Err(Error::InfeasibleRatio {
                    requested: opts.ratio,
                    max_achievable,
                });
            }
            f
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.unwrap_or(0));
    let mut removed = 0usize;
    let mut layers = Vec::with_capacity(w.layers.len());
    for (layer, scores) in w.layers.iter().zip(&report.layers) {
        let n_heads = per_layer_count(layer.n_heads, fraction)?;
        let n_units = per_layer_count(layer.d_intermediate, fraction)?;
        let heads = select(&scores.head_scores, n_heads, opts.strategy, &mut rng);
        let mlp = select(&scores.mlp_scores, n_units, opts.strategy, &mut rng);
        removed += removed_params(cfg.d_model, cfg.d_head, heads.len(), mlp.len());
        layers.push(LayerPlan { heads, mlp });
    }
    let embed = w.embedding_param_count() as f64;
    Ok(PruningPlan {
        version: PLAN_VERSION,
        model_fingerprint: report.model_fingerprint.clone(),
        strategy: opts.strategy,
        ratio_basis: opts.basis,
        requested_ratio: opts.ratio,
        per_layer_fraction: fraction,
        seed: (opts.strategy == Strategy::Random).then_some(opts.seed).flatten(),
        achieved_overall_ratio: removed as f64 / total,
        achieved_ratio_excluding_embeddings: removed as f64 / (total - embed),
        layers,
    })
}

fn kept(n: usize, removed: &[usize], what: &'static str, layer: usize) -> Result<Vec<usize>> {
    if removed.windows(2).any(|p| p[0] >= p[1]) {
        return Err(Error::PlanMismatch(format!(
            "layer {layer}: {what} indices must be sorted and unique"
        )));
    }
    if let Some(&bad) = removed.iter().find(|&&i| i >= n) {
        return Err(Error::PlanMismatch(format!(
            "layer {layer}: {what} index {bad} out of range ({n})"
        )));
    }
    if removed.len() >= n {
        return Err(Error::PlanMismatch(format!(
            "layer {layer}: removing all {n} {what}"
        )));
    }
    Ok((0..n).filter(|i| removed.binary_search(i).is_err()).collect())
}

fn prune_layer(layer: &LayerWeights, plan: &LayerPlan, d_head: usize, index: usize) -> Result<LayerWeights> {
    let keep_heads = kept(layer.n_heads, &plan.heads, "head", index)?;
    let keep_units = kept(layer.d_intermediate, &plan.mlp, "mlp", index)?;
    let keep_cols: Vec<usize> = keep_heads
        .iter()
        .flat_map(|&h| h * d_head..(h + 1) * d_head)
        .collect();
    Ok(LayerWeights {
        attn_norm: layer.attn_norm.clone(),
        wq: layer.wq.select_columns(&keep_cols)?,
        wk: layer.wk.select_columns(&keep_cols)?,
        wv: layer.wv.select_columns(&keep_cols)?,
        wo: layer.wo.select_rows(&keep_cols)?,
        mlp_norm: layer.mlp_norm.clone(),
        w_gate: layer.w_gate.select_columns(&keep_units)?,
        w_up: layer.w_up.select_columns(&keep_units)?,
        w_down: layer.w_down.select_rows(&keep_units)?,
        n_heads: keep_heads.len(),
        d_intermediate: keep_units.len(),
    })
}

/// Returns a new model with the planned heads and units sliced out.
pub fn apply_plan(w: &TransformerWeights, plan: &PruningPlan) -> Result<TransformerWeights> {
    w.validate()?;
    if plan.layers.len() != w.layers.len() {
        return Err(Error::PlanMismatch(format!(
            "plan has {} layers, model has {}",
            plan.layers.len(),
            w.layers.len()
        )));
    }
    let layers = w
        .layers
        .iter()
        .zip(&plan.layers)
        .enumerate()
        .map(|(i, (l, p))| prune_layer(l, p, w.config.d_head, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(TransformerWeights {
        config: w.config.clone(),
        token_embedding: w.token_embedding.clone(),
        layers,
        final_norm: w.final_norm.clone(),
        lm_head: w.lm_head.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AchievedRatio {
    pub overall: f64,
    pub excluding_embeddings: f64,
}

/// `1 − Q/P` by parameter census, with and without embedding/output head.
pub fn achieved_ratio(original: &TransformerWeights, pruned: &TransformerWeights) -> AchievedRatio {
    let p = original.param_count() as f64;
    let q = pruned.param_count() as f64;
    let e = original.embedding_param_count() as f64;
    let e_q = pruned.embedding_param_count() as f64;
    AchievedRatio {
        overall: 1.0 - q / p,
        excluding_embeddings: 1.0 - (q - e_q) / (p - e),
    }
}
