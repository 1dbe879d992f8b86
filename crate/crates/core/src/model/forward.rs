use crate::error::{Error, Result};
use crate::model::attention::{mha_decomposed, mha_standard};
use crate::model::mlp::{rms_norm, swiglu_mlp};
use crate::model::{ModelConfig, TokenId, TransformerWeights};
use crate::tensor::Tensor;

/// Activations a traced forward pass exposes for one layer.
pub struct LayerTrace<'a> {
    pub layer: usize,
    /// `h_n · W_n` for each head, each `S × d_model`.
    pub head_contribs: &'a [Tensor],
    /// Input to the down projection, `S × d_i`.
    pub down_input: &'a Tensor,
}

pub fn validate_tokens(cfg: &ModelConfig, tokens: &[TokenId]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::InvalidArgument("empty token sequence".into()));
    }
    if tokens.len() > cfg.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: tokens.len(),
            max: cfg.max_seq_len,
        });
    }
    if let Some((position, &id)) = tokens
        .iter()
        .enumerate()
        .find(|(_, &t)| t as usize >= cfg.vocab_size)
    {
        return Err(Error::TokenOutOfRange {
            id,
            position,
            vocab: cfg.vocab_size,
        });
    }
    Ok(())
}

pub(crate) fn embed(w: &TransformerWeights, tokens: &[TokenId]) -> Tensor {
    let d = w.config.d_model;
    let mut data = Vec::with_capacity(tokens.len() * d);
    for &t in tokens {
        data.extend_from_slice(w.token_embedding.row(t as usize));
    }
    Tensor::from_vec2(tokens.len(), d, data)
}

/// Logits (`S × vocab_size`) for every position.
pub fn forward(w: &TransformerWeights, tokens: &[TokenId]) -> Result<Tensor> {
    w.validate()?;
    validate_tokens(&w.config, tokens)?;
    let cfg = &w.config;
    let mut x = embed(w, tokens);
    for layer in &w.layers {
        let h = rms_norm(&x, &layer.attn_norm, cfg.rms_norm_eps)?;
        x.add_assign(&mha_standard(&h, layer, cfg)?)?;
        let h = rms_norm(&x, &layer.mlp_norm, cfg.rms_norm_eps)?;
        x.add_assign(&swiglu_mlp(&h, layer, false)?.0)?;
    }
    rms_norm(&x, &w.final_norm, cfg.rms_norm_eps)?.matmul(&w.lm_head)
}

/// Forward pass through the head-decomposed attention path, handing each
/// layer's per-head contributions and MLP activations to `observe`.
pub fn forward_traced<F>(w: &TransformerWeights, tokens: &[TokenId], mut observe: F) -> Result<Tensor>
where
    F: FnMut(LayerTrace<'_>) -> Result<()>,
{
    w.validate()?;
    validate_tokens(&w.config, tokens)?;
    let cfg = &w.config;
    let mut x = embed(w, tokens);
    for (i, layer) in w.layers.iter().enumerate() {
        let h = rms_norm(&x, &layer.attn_norm, cfg.rms_norm_eps)?;
        let (attn, contribs) = mha_decomposed(&h, layer, cfg)?;
        x.add_assign(&attn)?;
        let h = rms_norm(&x, &layer.mlp_norm, cfg.rms_norm_eps)?;
        let (mlp, down_input) = swiglu_mlp(&h, layer, true)?;
        x.add_assign(&mlp)?;
        observe(LayerTrace {
            layer: i,
            head_contribs: &contribs,
            down_input: down_input.as_ref().expect("captured"),
        })?;
    }
    rms_norm(&x, &w.final_norm, cfg.rms_norm_eps)?.matmul(&w.lm_head)
}
