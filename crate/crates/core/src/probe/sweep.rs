use serde::{Deserialize, Serialize};

use crate::data::RawExample;
use crate::error::{check_len, domain, Result};
use crate::eval::parse_answer;
use crate::intervention::{Edit, InterventionParams, PositionMask};
use crate::model::{decode, BaseWeights, DecodeOptions};
use crate::tokenizer::tokenize;

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    /// Non-negative and strictly increasing.
    pub deltas: Vec<f64>,
    /// Blocks whose output receives `+δ·N̂`.
    pub layers: Vec<usize>,
    pub max_new: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub delta: f64,
    /// Items whose answer grew or stopped parsing.
    pub changed: usize,
    /// Items whose answer differs from the baseline in either direction.
    pub differ: usize,
    pub total: usize,
    pub error_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub points: Vec<SweepPoint>,
    /// Items left out because their unedited answer did not parse.
    pub excluded: Vec<usize>,
}

/// Adds `δ·direction` to the hidden state of the newest token at every
/// decoding step (the last prompt token and every generated token) and
/// counts answers that change relative to the unedited decode.
pub fn directional_sweep(
    weights: &BaseWeights,
    direction: &[f64],
    cfg: &SweepConfig,
    examples: &[RawExample],
) -> Result<SweepResult> {
    let d = weights.config.embed_dim;
    check_len(d, direction.len())?;
    if examples.is_empty() {
        return Err(domain("sweep needs at least one problem"));
    }
    if cfg.deltas.is_empty() || cfg.deltas[0] < 0.0 || cfg.deltas.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(domain("sweep deltas must be non-negative and strictly increasing"));
    }
    if let Some(l) = cfg.layers.iter().find(|&&l| l >= weights.config.num_layers) {
        return Err(domain(format!("sweep layer {l} out of range")));
    }
    let opts = DecodeOptions::greedy(cfg.max_new);
    let prompts = examples
        .iter()
        .map(|e| tokenize(&e.question))
        .collect::<Result<Vec<_>>>()?;
    let mut baseline = Vec::new();
    let mut excluded = Vec::new();
    for (i, p) in prompts.iter().enumerate() {
        match parse_answer(&decode(weights, None, p, &opts)?) {
            Some(v) => baseline.push((i, v)),
            None => excluded.push(i),
        }
    }
    let total = baseline.len();
    let mut points = Vec::with_capacity(cfg.deltas.len());
    for &delta in &cfg.deltas {
        let (mut changed, mut differ) = (0, 0);
        if delta > 0.0 {
            let mut params = InterventionParams::identity(d, &cfg.layers);
            for slot in 0..params.layers.len() {
                for (b, u) in params.bias_mut(slot).iter_mut().zip(direction) {
                    *b = delta * u;
                }
            }
            for &(i, before) in &baseline {
                let p = &prompts[i];
                let edit = Edit {
                    params: &params,
                    mask: PositionMask::From(p.len() - 1),
                };
                let after = parse_answer(&decode(weights, Some(&edit), p, &opts)?);
                changed += after.map_or(true, |a| a > before) as usize;
                differ += (after != Some(before)) as usize;
            }
        }
        points.push(SweepPoint {
            delta,
            changed,
            differ,
            total,
            error_rate: if total == 0 { 0.0 } else { changed as f64 / total as f64 },
        });
    }
    Ok(SweepResult { points, excluded })
}

pub fn sweep_csv(result: &SweepResult) -> String {
    let mut s = String::from("delta,changed,total,error_rate\n");
    for p in &result.points {
        s.push_str(&format!("{},{},{},{}\n", p.delta, p.changed, p.total, p.error_rate));
    }
    s
}
