//! LLaMA-style decoder: pre-norm RMSNorm, rotary positions, causal
//! multi-head attention with an untied output head, SwiGLU MLP, no biases.
//!
//! Weight matrices are stored input-major (`x · W`), so a head's query,
//! key and value projections are a contiguous column block of `wq`, `wk`
//! and `wv`, and its slice of the output projection is a row block of `wo`.

pub(crate) mod attention;
pub(crate) mod forward;
pub(crate) mod generate;
pub(crate) mod mlp;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use attention::{
    attention_head, causal_attention, mha_decomposed, mha_standard, project_heads, Rope,
};
pub use forward::{forward, forward_traced, validate_tokens, LayerTrace};
pub use generate::{argmax, generate, KvCache};
pub use mlp::{rms_norm, swiglu_mlp};

pub type TokenId = u32;

fn default_rope_theta() -> f64 {
    10000.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    /// Heads per layer before pruning.
    pub n_heads: usize,
    pub d_head: usize,
    /// MLP intermediate width before pruning.
    pub d_intermediate: usize,
    pub max_seq_len: usize,
    pub rms_norm_eps: f64,
    #[serde(default = "default_rope_theta")]
    pub rope_theta: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_head", self.d_head),
            ("d_intermediate", self.d_intermediate),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.n_heads * self.d_head != self.d_model {
            return Err(Error::Config(format!(
                "d_model {} != n_heads {} * d_head {}",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        if !self.d_head.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "d_head {} must be even for rotary embeddings",
                self.d_head
            )));
        }
        if !(self.rms_norm_eps.is_finite() && self.rms_norm_eps > 0.0) {
            return Err(Error::Config("rms_norm_eps must be positive".into()));
        }
        if !(self.rope_theta.is_finite() && self.rope_theta > 0.0) {
            return Err(Error::Config("rope_theta must be positive".into()));
        }
        Ok(())
    }
}

/// One decoder block. `n_heads` and `d_intermediate` describe this layer,
/// which differ from the config after pruning.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub mlp_norm: Tensor,
    pub w_gate: Tensor,
    pub w_up: Tensor,
    pub w_down: Tensor,
    pub n_heads: usize,
    pub d_intermediate: usize,
}

impl LayerWeights {
    pub fn zeros(cfg: &ModelConfig, n_heads: usize, d_intermediate: usize) -> Self {
        let (d, hw) = (cfg.d_model, n_heads * cfg.d_head);
        LayerWeights {
            attn_norm: Tensor::full(&[d], 1.0),
            wq: Tensor::zeros(&[d, hw]),
            wk: Tensor::zeros(&[d, hw]),
            wv: Tensor::zeros(&[d, hw]),
            wo: Tensor::zeros(&[hw, d]),
            mlp_norm: Tensor::full(&[d], 1.0),
            w_gate: Tensor::zeros(&[d, d_intermediate]),
            w_up: Tensor::zeros(&[d, d_intermediate]),
            w_down: Tensor::zeros(&[d_intermediate, d]),
            n_heads,
            d_intermediate,
        }
    }

    /// Tensors in canonical checkpoint order, with their short names.
    pub fn named(&self) -> [(&'static str, &Tensor); 9] {
        [
            ("attn_norm", &self.attn_norm),
            ("Wq", &self.wq),
            ("Wk", &self.wk),
            ("Wv", &self.wv),
            ("Wo", &self.wo),
            ("mlp_norm", &self.mlp_norm),
            ("Wgate", &self.w_gate),
            ("Wup", &self.w_up),
            ("Wdown", &self.w_down),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 9] {
        [
            &mut self.attn_norm,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.mlp_norm,
            &mut self.w_gate,
            &mut self.w_up,
            &mut self.w_down,
        ]
    }

    pub fn expected_shapes(
        cfg: &ModelConfig,
        n_heads: usize,
        d_intermediate: usize,
    ) -> [(&'static str, Vec<usize>); 9] {
        let (d, hw, di) = (cfg.d_model, n_heads * cfg.d_head, d_intermediate);
        [
            ("attn_norm", vec![d]),
            ("Wq", vec![d, hw]),
            ("Wk", vec![d, hw]),
            ("Wv", vec![d, hw]),
            ("Wo", vec![hw, d]),
            ("mlp_norm", vec![d]),
            ("Wgate", vec![d, di]),
            ("Wup", vec![d, di]),
            ("Wdown", vec![di, d]),
        ]
    }

    pub fn validate(&self, cfg: &ModelConfig, index: usize) -> Result<()> {
        if self.n_heads == 0 || self.d_intermediate == 0 {
            return Err(Error::Config(format!(
                "layer {index} has {} heads and {} MLP units; both must be at least 1",
                self.n_heads, self.d_intermediate
            )));
        }
        let expected = Self::expected_shapes(cfg, self.n_heads, self.d_intermediate);
        for ((name, t), (_, shape)) in self.named().iter().zip(expected.iter()) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Config(format!(
                    "layers.{index}.{name} has shape {:?}, expected {:?}",
                    t.shape(),
                    shape
                )));
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Parameters removable by head or MLP-pair pruning (all projections).
    pub fn prunable_param_count(&self) -> usize {
        self.named()
            .iter()
            .filter(|(name, _)| !name.ends_with("norm"))
            .map(|(_, t)| t.numel())
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerWeights {
    pub config: ModelConfig,
    pub token_embedding: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Tensor,
    /// Untied output head, `d_model × vocab_size`.
    pub lm_head: Tensor,
}

impl TransformerWeights {
    /// All-zero projections and unit norms at the base configuration.
    pub fn zeros(config: &ModelConfig) -> Self {
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights::zeros(config, config.n_heads, config.d_intermediate))
            .collect();
        TransformerWeights {
            config: config.clone(),
            token_embedding: Tensor::zeros(&[config.vocab_size, config.d_model]),
            layers,
            final_norm: Tensor::full(&[config.d_model], 1.0),
            lm_head: Tensor::zeros(&[config.d_model, config.vocab_size]),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for t in out.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = &self.config;
        cfg.validate()?;
        if self.layers.len() != cfg.n_layers {
            return Err(Error::Config(format!(
                "{} layers present, config declares {}",
                self.layers.len(),
                cfg.n_layers
            )));
        }
        let globals = [
            ("token_embedding", &self.token_embedding, vec![cfg.vocab_size, cfg.d_model]),
            ("final_norm", &self.final_norm, vec![cfg.d_model]),
            ("lm_head", &self.lm_head, vec![cfg.d_model, cfg.vocab_size]),
        ];
        for (name, t, shape) in globals {
            if t.shape() != shape.as_slice() {
                return Err(Error::Config(format!(
                    "{name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        for (i, layer) in self.layers.iter().enumerate() {
            layer.validate(cfg, i)?;
        }
        Ok(())
    }

    /// Every tensor with its canonical name, in checkpoint order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("token_embedding".to_string(), &self.token_embedding)];
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in layer.named() {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("lm_head".to_string(), &self.lm_head));
        out
    }

    /// Mutable tensors in the same order as [`TransformerWeights::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.token_embedding];
        for layer in self.layers.iter_mut() {
            out.extend(layer.tensors_mut());
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.lm_head);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn prunable_param_count(&self) -> usize {
        self.layers.iter().map(LayerWeights::prunable_param_count).sum()
    }

    /// Token embedding plus output head.
    pub fn embedding_param_count(&self) -> usize {
        self.token_embedding.numel() + self.lm_head.numel()
    }

    pub fn all_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.all_finite())
    }
}


#[cfg(test)]
mod tests {
    use super::testutil::*;
    use super::*;

    #[test]
    fn config_validation() {
        let cfg = tiny_config(2, 4, 8, 1);
        cfg.validate().unwrap();
        let mut bad = cfg.clone();
        bad.d_model = 9;
        assert!(bad.validate().is_err());
        let mut bad = cfg.clone();
        bad.rms_norm_eps = 0.0;
        assert!(bad.validate().is_err());
        let mut bad = cfg;
        bad.n_layers = 0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn param_count_matches_census() {
        let cfg = tiny_config(2, 4, 8, 3);
        let w = TransformerWeights::zeros(&cfg);
        let d = 8;
        let per_layer = 2 * d + 4 * d * d + 3 * d * 8;
        assert_eq!(w.param_count(), 2 * 11 * d + d + 3 * per_layer);
        assert_eq!(w.prunable_param_count(), 3 * (4 * d * d + 3 * d * 8));
        w.validate().unwrap();
    }

    #[test]
    fn validate_catches_layer_inconsistency() {
        let cfg = tiny_config(2, 4, 8, 1);
        let mut w = TransformerWeights::zeros(&cfg);
        w.layers[0].n_heads = 1;
        assert!(w.validate().is_err());
    }

    #[test]
    fn named_and_mut_orders_agree() {
        let cfg = tiny_config(2, 4, 8, 2);
        let mut w = random_weights(&cfg, 3);
        let shapes: Vec<_> = w.named_tensors().iter().map(|(_, t)| t.shape().to_vec()).collect();
        let shapes_mut: Vec<_> = w.tensors_mut().iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(shapes, shapes_mut);
        assert_eq!(w.named_tensors()[7].0, "layers.0.Wgate");
    }
}
