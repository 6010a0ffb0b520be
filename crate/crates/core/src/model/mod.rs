//! Decoder-only base model: pre-norm blocks, exact reverse-mode gradients,
//! and autoregressive decoding.

mod backward;
mod config;
mod decode;
mod forward;
mod loss;
mod packing;
mod weights;

pub use backward::{backward, GradientSet, Trainable};
pub use config::ModelConfig;
pub use decode::{decode, DecodeMode, DecodeOptions};
pub use forward::{forward, forward_packed, ForwardTrace, LayerActivations};
pub use packing::Packing;
pub use loss::{cross_entropy_prefix, prefix_weights, weighted_cross_entropy};
pub use weights::{BaseWeights, BlockLayout, Layout};

use crate::error::Result;
use crate::intervention::{Edit, InterventionParams, PositionMask};

/// Forward, weighted loss over response rows, and backward in one call.
///
/// `prompt_len` is the number of prompt tokens in `tokens`; response token
/// `i` is predicted by logit row `prompt_len - 1 + i`.
pub fn loss_and_gradients(
    weights: &BaseWeights,
    tokens: &[usize],
    prompt_len: usize,
    loss_weights: &[f64],
    edit: Option<&Edit<'_>>,
    trainable: Trainable,
) -> Result<(f64, GradientSet)> {
    let trace = forward(weights, tokens, edit)?;
    let targets = &tokens[prompt_len..];
    let (loss, dlogits) = weighted_cross_entropy(
        &trace.logits,
        weights.config.vocab_size,
        prompt_len - 1,
        targets,
        loss_weights,
    )?;
    let mut grads = GradientSet::zeros(weights, edit.map(|e| e.params), trainable);
    if !grads.is_empty() {
        backward(weights, &trace, &dlogits, &mut grads)?;
        grads.check_finite(weights)?;
    }
    Ok((loss, grads))
}

/// One sequence in a packed training batch.
#[derive(Debug, Clone)]
pub struct BatchItem<'a> {
    pub tokens: &'a [usize],
    pub prompt_len: usize,
    /// Loss weight for each response token.
    pub loss_weights: Vec<f64>,
    /// Edit placement for this item; ignored when no parameters are given.
    pub mask: Option<PositionMask>,
}

/// Longest prefix shared by every item whose edit flags also agree, capped
/// so each item keeps its last prompt token in its own segment.
fn shareable_prefix(items: &[BatchItem<'_>], params: Option<&InterventionParams>) -> usize {
    let first = items[0].tokens;
    let mut shared = items.iter().map(|it| it.prompt_len - 1).min().unwrap_or(0);
    for it in &items[1..] {
        let common = first.iter().zip(it.tokens).take_while(|(a, b)| a == b).count();
        shared = shared.min(common);
    }
    if params.is_some() {
        let flag = |it: &BatchItem<'_>, p: usize| it.mask.map_or(false, |m| m.contains(p));
        let agree = (0..shared)
            .take_while(|&p| items.iter().all(|it| flag(it, p) == flag(&items[0], p)))
            .count();
        shared = agree;
    }
    shared
}

/// Weighted loss and gradients for a batch, computing the common prompt
/// prefix once. Returns the per-item losses.
pub fn batch_loss_and_gradients(
    weights: &BaseWeights,
    items: &[BatchItem<'_>],
    params: Option<&InterventionParams>,
    trainable: Trainable,
) -> Result<(Vec<f64>, GradientSet)> {
    if items.is_empty() {
        return Err(crate::error::domain("empty batch"));
    }
    for it in items {
        if it.prompt_len == 0 || it.prompt_len >= it.tokens.len() {
            return Err(crate::error::domain("each item needs a prompt and a response"));
        }
        crate::error::check_len(it.tokens.len() - it.prompt_len, it.loss_weights.len())?;
    }
    let shared = shareable_prefix(items, params);
    let seqs: Vec<&[usize]> = items.iter().map(|it| it.tokens).collect();
    let packing = Packing::shared_prefix(&seqs, shared)?;
    let rows: Option<Vec<bool>> = params.map(|_| {
        let mut rows = vec![false; packing.len()];
        for (seg, it) in items.iter().enumerate() {
            if let Some(m) = it.mask {
                for p in 0..it.tokens.len() {
                    if m.contains(p) {
                        rows[packing.row(seg, p)] = true;
                    }
                }
            }
        }
        rows
    });
    let trace = forward_packed(weights, &packing, params.zip(rows.as_deref()))?;
    let vocab = weights.config.vocab_size;
    let mut dlogits = vec![0.0; packing.len() * vocab];
    let mut losses = Vec::with_capacity(items.len());
    for (seg, it) in items.iter().enumerate() {
        let mut loss = 0.0;
        for (i, (&y, &wt)) in it.tokens[it.prompt_len..].iter().zip(&it.loss_weights).enumerate() {
            if wt == 0.0 {
                continue;
            }
            let r = packing.row(seg, it.prompt_len - 1 + i);
            let lp = crate::ops::log_softmax(trace.logits_row(r, vocab));
            loss -= wt * lp[y];
            let g = &mut dlogits[r * vocab..(r + 1) * vocab];
            for (gj, l) in g.iter_mut().zip(&lp) {
                *gj += wt * l.exp();
            }
            g[y] -= wt;
        }
        losses.push(loss);
    }
    let mut grads = GradientSet::zeros(weights, params, trainable);
    if !grads.is_empty() {
        backward(weights, &trace, &dlogits, &mut grads)?;
        grads.check_finite(weights)?;
    }
    Ok((losses, grads))
}
