//! Base-model pretraining and intervention training (BREP and the
//! unconstrained full-response baseline).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{truncate_response, TrainExample};
use crate::error::{domain, Error, Result};
use crate::eval::{exact_match, Steering};
use crate::intervention::{mean_bias_norm, Edit, InterventionParams, InterventionScope, PositionMask};
use crate::metrics::{EvalRecord, RunMetrics, StepRecord};
use crate::model::{batch_loss_and_gradients, forward, BaseWeights, BatchItem, Trainable};
use crate::optim::{clip_global_norm, warmup_cosine, Adam};
use crate::pid::{PidController, PidGains};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Linear warmup steps; only used with `cosine`.
    pub warmup: usize,
    /// Cosine decay to 10% of `lr` after warmup; otherwise constant.
    pub cosine: bool,
    pub clip: Option<f64>,
    pub seed: u64,
}

impl OptimConfig {
    fn lr_at(&self, step: usize) -> f64 {
        if self.cosine {
            warmup_cosine(step, self.steps, self.warmup, self.lr, 0.1)
        } else {
            self.lr
        }
    }
}

/// Index of a uniformly drawn batch, with replacement.
fn sample_batch(rng: &mut ChaCha8Rng, n: usize, batch: usize) -> Vec<usize> {
    (0..batch).map(|_| rng.gen_range(0..n)).collect()
}

/// Teacher-forced argmax accuracy over every response token (EOS included).
pub fn token_accuracy(
    weights: &BaseWeights,
    examples: &[TrainExample],
    params: Option<(&InterventionParams, InterventionScope)>,
) -> Result<f64> {
    let vocab = weights.config.vocab_size;
    let (mut hit, mut total) = (0usize, 0usize);
    for ex in examples {
        let seq = ex.sequence();
        let p = ex.prompt_tokens.len();
        let edit = params.map(|(pr, scope)| Edit::scoped(pr, scope, p));
        let trace = forward(weights, &seq, edit.as_ref())?;
        for (i, &y) in ex.response_tokens.iter().enumerate() {
            let row = trace.logits_row(p - 1 + i, vocab);
            let arg = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (j, &l)| if l > b.1 { (j, l) } else { b })
                .0;
            hit += (arg == y) as usize;
            total += 1;
        }
    }
    if total == 0 {
        return Err(domain("token accuracy over an empty set"));
    }
    Ok(hit as f64 / total as f64)
}

/// Periodic held-out evaluation hook.
pub struct EvalPlan<'a> {
    pub examples: &'a [TrainExample],
    pub every: usize,
}

impl EvalPlan<'_> {
    /// Every `every` steps and after the last one.
    fn due(&self, step: usize, total: usize) -> bool {
        self.every > 0 && ((step + 1) % self.every == 0 || step + 1 == total)
    }
}

/// Trains every base parameter on full-length responses. Per-example loss
/// is the mean cross-entropy over its response tokens; the batch loss is
/// the mean over examples.
pub fn train_base(
    init: BaseWeights,
    train: &[TrainExample],
    opt: &OptimConfig,
    eval: Option<EvalPlan<'_>>,
) -> Result<(BaseWeights, RunMetrics)> {
    if train.is_empty() {
        return Err(domain("empty training set"));
    }
    let mut weights = init;
    let mut adam = Adam::new(weights.num_params(), opt.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(opt.seed);
    let mut metrics = RunMetrics::default();
    let inv_b = 1.0 / opt.batch_size as f64;

    for step in 0..opt.steps {
        let batch = sample_batch(&mut rng, train.len(), opt.batch_size);
        let seqs: Vec<Vec<usize>> = batch.iter().map(|&i| train[i].sequence()).collect();
        let items: Vec<BatchItem<'_>> = batch
            .iter()
            .zip(&seqs)
            .map(|(&i, seq)| {
                let r = train[i].response_tokens.len();
                BatchItem {
                    tokens: seq,
                    prompt_len: train[i].prompt_tokens.len(),
                    loss_weights: vec![inv_b / r as f64; r],
                    mask: None,
                }
            })
            .collect();
        let (losses, g) = batch_loss_and_gradients(&weights, &items, None, Trainable::BASE)?;
        let loss: f64 = losses.iter().sum();
        let mut grads = g.base.expect("base gradients requested");
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        if let Some(c) = opt.clip {
            clip_global_norm(&mut grads, c);
        }
        adam.step(&mut weights.data, &grads, opt.lr_at(step));
        metrics.steps.push(StepRecord {
            step,
            loss_ce: loss,
            w: 1.0,
            loss_total: loss,
            bias_norm: None,
            error: None,
            dw: None,
            w_next: None,
        });
        if let Some(plan) = &eval {
            if plan.due(step, opt.steps) {
                metrics.evals.push(EvalRecord {
                    step,
                    token_accuracy: token_accuracy(&weights, plan.examples, None)?,
                    exact_match: Some(exact_match(&weights, None, plan.examples, 16)?),
                });
            }
        }
    }
    Ok((weights, metrics))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionMode {
    Brep,
    ReftFull,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterventionTrainConfig {
    pub mode: InterventionMode,
    /// Train prefix length; `None` keeps full responses.
    pub k: Option<usize>,
    pub layers: Vec<usize>,
    /// Scope used while training.
    pub scope: InterventionScope,
    pub freeze_scale: bool,
    pub optim: OptimConfig,
    /// PID control of the loss weight; `None` pins `w = fixed_weight`.
    pub pid: Option<PidGains>,
    pub fixed_weight: f64,
    /// Scope used by periodic exact-match evaluation.
    pub eval_scope: InterventionScope,
    pub eval_max_new: usize,
}

impl InterventionTrainConfig {
    /// Prefix-truncated, response-scoped, PID-regulated training.
    pub fn brep(layers: Vec<usize>, k: usize, optim: OptimConfig, gains: PidGains) -> Self {
        Self {
            mode: InterventionMode::Brep,
            k: Some(k),
            layers,
            scope: InterventionScope::response_only(None),
            freeze_scale: false,
            optim,
            pid: Some(gains),
            fixed_weight: 1.0,
            eval_scope: InterventionScope::response_only(Some(8)),
            eval_max_new: 16,
        }
    }

    /// Full responses, every response position edited, `w = 1`.
    pub fn reft_full(layers: Vec<usize>, optim: OptimConfig) -> Self {
        Self {
            mode: InterventionMode::ReftFull,
            k: None,
            layers,
            scope: InterventionScope::response_only(None),
            freeze_scale: false,
            optim,
            pid: None,
            fixed_weight: 1.0,
            eval_scope: InterventionScope::response_only(None),
            eval_max_new: 16,
        }
    }
}

/// Applies the configured truncation to every example.
pub fn prepare_examples(examples: &[TrainExample], k: Option<usize>) -> Result<Vec<TrainExample>> {
    match k {
        Some(k) => examples.iter().map(|e| truncate_response(e, k)).collect(),
        None => Ok(examples.to_vec()),
    }
}

/// Batch gradient of the weighted prefix loss for intervention parameters.
/// Returns the unweighted mean cross-entropy and the gradient of `w · L_ce`.
pub fn intervention_batch_gradient(
    base: &BaseWeights,
    params: &InterventionParams,
    scope: InterventionScope,
    batch: &[&TrainExample],
    w: f64,
) -> Result<(f64, Vec<f64>)> {
    let inv_b = 1.0 / batch.len() as f64;
    let seqs: Vec<Vec<usize>> = batch.iter().map(|ex| ex.sequence()).collect();
    let items: Vec<BatchItem<'_>> = batch
        .iter()
        .zip(&seqs)
        .map(|(ex, seq)| {
            let r = ex.response_tokens.len();
            BatchItem {
                tokens: seq,
                prompt_len: ex.prompt_tokens.len(),
                loss_weights: vec![inv_b / r as f64; r],
                mask: Some(PositionMask::Scoped {
                    scope,
                    prompt_len: ex.prompt_tokens.len(),
                }),
            }
        })
        .collect();
    let (losses, g) = batch_loss_and_gradients(base, &items, Some(params), Trainable::INTERVENTION)?;
    let loss: f64 = losses.iter().sum();
    let mut grad = g.intervention.expect("intervention gradients requested");
    for g in grad.iter_mut() {
        *g *= w;
    }
    Ok((loss, grad))
}

/// Trains per-layer scale/bias edits on a frozen base.
pub fn train_intervention(
    base: &BaseWeights,
    train: &[TrainExample],
    cfg: &InterventionTrainConfig,
    eval: Option<EvalPlan<'_>>,
) -> Result<(InterventionParams, RunMetrics)> {
    if train.is_empty() {
        return Err(domain("empty training set"));
    }
    let digest_before = base.digest();
    let examples = prepare_examples(train, cfg.k)?;
    let mut params = InterventionParams::identity(base.config.embed_dim, &cfg.layers);
    if let Some(&bad) = params.layers.iter().find(|&&l| l >= base.config.num_layers) {
        return Err(Error::Config(format!("layer {bad} out of range")));
    }
    let mut controller = cfg.pid.map(PidController::new).transpose()?;
    let mut adam = Adam::new(params.data.len(), cfg.optim.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.optim.seed);
    let scale_idx: Vec<usize> = params.scale_indices().collect();
    let mut metrics = RunMetrics::default();

    for step in 0..cfg.optim.steps {
        let w = controller.as_ref().map_or(cfg.fixed_weight, PidController::weight);
        let idx = sample_batch(&mut rng, examples.len(), cfg.optim.batch_size);
        let batch: Vec<&TrainExample> = idx.iter().map(|&i| &examples[i]).collect();
        let (loss_ce, mut grad) = intervention_batch_gradient(base, &params, cfg.scope, &batch, w)?;
        if !loss_ce.is_finite() {
            return Err(Error::Divergence { step, loss: loss_ce });
        }
        if cfg.freeze_scale {
            for &i in &scale_idx {
                grad[i] = 0.0;
            }
        }
        if let Some(c) = cfg.optim.clip {
            clip_global_norm(&mut grad, c);
        }
        adam.step(&mut params.data, &grad, cfg.optim.lr_at(step));
        let bias_norm = mean_bias_norm(&params)?;
        let mut rec = StepRecord {
            step,
            loss_ce,
            w,
            loss_total: crate::pid::total_loss(w, loss_ce),
            bias_norm: Some(bias_norm),
            error: None,
            dw: None,
            w_next: None,
        };
        if let Some(c) = controller.as_mut() {
            let t = c.observe(bias_norm)?;
            rec.error = Some(t.error);
            rec.dw = Some(t.dw);
            rec.w_next = Some(t.w_next);
        }
        metrics.steps.push(rec);
        if let Some(plan) = &eval {
            if plan.due(step, cfg.optim.steps) {
                let steering = Steering {
                    params: &params,
                    scope: cfg.eval_scope,
                };
                metrics.evals.push(EvalRecord {
                    step,
                    token_accuracy: token_accuracy(base, plan.examples, Some((&params, cfg.eval_scope)))?,
                    exact_match: Some(exact_match(base, Some(steering), plan.examples, cfg.eval_max_new)?),
                });
            }
        }
    }
    if base.digest() != digest_before {
        return Err(Error::FrozenMutation);
    }
    Ok((params, metrics))
}
