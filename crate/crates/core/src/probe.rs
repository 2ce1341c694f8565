//! Removes one prompt token's hidden state from a chosen layer on and
//! measures how far the final logits move.

use serde::Serialize;

use crate::model::{KvContext, LayerActivations, Model, ModelError};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeResult {
    pub prune_token: usize,
    pub prune_layer: usize,
    pub max_abs: f64,
    /// `1 - cos(dense, pruned)`.
    pub cosine_divergence: f64,
}

/// Full forward pass; when `drop` is `Some((token, layer))` that token's row
/// is removed before `layer` runs. Returns the logits of the last surviving row.
pub fn forward_logits(
    model: &Model,
    prompt: &[u32],
    drop: Option<(usize, usize)>,
) -> Result<Vec<f32>, ModelError> {
    let hidden_dim = model.config().hidden();
    let mut acts = LayerActivations {
        layer: 0,
        hidden: model.embed(prompt)?,
        retained_positions: (0..prompt.len()).collect(),
    };
    for layer in 0..model.config().n_layers {
        if let Some((token, at)) = drop {
            if at == layer {
                let keep: Vec<usize> = (0..acts.retained_positions.len())
                    .filter(|&r| acts.retained_positions[r] != token)
                    .collect();
                acts.hidden = acts.hidden.select_rows(&keep);
                acts.retained_positions.retain(|&p| p != token);
            }
        }
        acts = model.layer_forward(&acts, &KvContext::empty(hidden_dim))?.acts;
    }
    let last = acts.hidden.rows() - 1;
    model.logits(acts.hidden.row(last))
}

pub fn divergence(a: &[f32], b: &[f32]) -> (f64, f64) {
    let max_abs = a
        .iter()
        .zip(b)
        .map(|(x, y)| (*x as f64 - *y as f64).abs())
        .fold(0.0, f64::max);
    if max_abs == 0.0 {
        return (0.0, 0.0);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let cos = if na == 0.0 || nb == 0.0 { 1.0 } else { dot / (na * nb) };
    (max_abs, (1.0 - cos).max(0.0))
}

#[derive(Debug, thiserror::Error)]
pub enum ProbeError {
    #[error("prune_token {0} outside prompt of {1} tokens")]
    Token(usize, usize),
    #[error("prune_layer {0} above n_layers {1}")]
    Layer(usize, usize),
    #[error("removing the only prompt token leaves nothing to read logits from")]
    Empty,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// `prune_layer == n_layers` removes nothing.
pub fn probe(
    model: &Model,
    prompt: &[u32],
    prune_token: usize,
    prune_layer: usize,
) -> Result<ProbeResult, ProbeError> {
    let n_layers = model.config().n_layers;
    if prune_token >= prompt.len() {
        return Err(ProbeError::Token(prune_token, prompt.len()));
    }
    if prune_layer > n_layers {
        return Err(ProbeError::Layer(prune_layer, n_layers));
    }
    if prompt.len() == 1 && prune_layer < n_layers {
        return Err(ProbeError::Empty);
    }
    let dense = forward_logits(model, prompt, None)?;
    let pruned = forward_logits(model, prompt, Some((prune_token, prune_layer)))?;
    let (max_abs, cosine_divergence) = divergence(&dense, &pruned);
    Ok(ProbeResult {
        prune_token,
        prune_layer,
        max_abs,
        cosine_divergence,
    })
}
