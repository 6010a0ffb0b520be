//! Analytic gradients against central finite differences.

use brep_core::model::{loss_and_gradients, prefix_weights, Trainable};
use brep_core::{BaseWeights, Edit, InterventionParams, InterventionScope, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;
const REL_TOL: f64 = 1e-5;
// below this magnitude both gradients are treated as zero
const ZERO_FLOOR: f64 = 1e-8;

fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < ZERO_FLOOR {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

fn small_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 16,
        embed_dim: 8,
        num_layers: 2,
        num_heads: 2,
        context_len: 8,
        seed: 11,
    }
}

fn jittered_weights(cfg: ModelConfig, seed: u64) -> BaseWeights {
    let mut w = BaseWeights::init(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in &mut w.data {
        *v += rng.gen_range(-0.3..0.3);
    }
    w
}

fn jittered_edit(dim: usize, layers: &[usize], seed: u64) -> InterventionParams {
    let mut p = InterventionParams::identity(dim, layers);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in &mut p.data {
        *v += rng.gen_range(-0.5..0.5);
    }
    p
}

#[test]
fn base_and_intervention_gradients_match_finite_differences() {
    let cfg = small_config();
    let weights = jittered_weights(cfg, 1);
    let params = jittered_edit(cfg.embed_dim, &[0, 1], 2);
    let tokens = [3, 7, 1, 12, 5, 9, 2];
    let prompt_len = 3;
    let lw = prefix_weights(tokens.len() - prompt_len, 3);
    let scope = InterventionScope::response_only(Some(2));

    let loss_of = |w: &BaseWeights, p: &InterventionParams| {
        let edit = Edit::scoped(p, scope, prompt_len);
        loss_and_gradients(w, &tokens, prompt_len, &lw, Some(&edit), Trainable::NONE)
            .unwrap()
            .0
    };

    let edit = Edit::scoped(&params, scope, prompt_len);
    let both = Trainable {
        base: true,
        intervention: true,
    };
    let (_, grads) = loss_and_gradients(&weights, &tokens, prompt_len, &lw, Some(&edit), both).unwrap();
    let base_grad = grads.base.unwrap();
    let int_grad = grads.intervention.unwrap();

    let mut worst: f64 = 0.0;
    let mut w = weights.clone();
    for i in 0..w.data.len() {
        let orig = w.data[i];
        w.data[i] = orig + EPS;
        let up = loss_of(&w, &params);
        w.data[i] = orig - EPS;
        let down = loss_of(&w, &params);
        w.data[i] = orig;
        let fd = (up - down) / (2.0 * EPS);
        let e = rel_err(base_grad[i], fd);
        assert!(e < REL_TOL, "base param {i}: analytic {} vs fd {fd} (rel {e})", base_grad[i]);
        worst = worst.max(e);
    }
    let mut p = params.clone();
    for i in 0..p.data.len() {
        let orig = p.data[i];
        p.data[i] = orig + EPS;
        let up = loss_of(&weights, &p);
        p.data[i] = orig - EPS;
        let down = loss_of(&weights, &p);
        p.data[i] = orig;
        let fd = (up - down) / (2.0 * EPS);
        let e = rel_err(int_grad[i], fd);
        assert!(e < REL_TOL, "intervention param {i}: analytic {} vs fd {fd} (rel {e})", int_grad[i]);
        worst = worst.max(e);
    }
    eprintln!("worst relative error {worst:e}");
}

#[test]
fn frozen_everything_yields_empty_set() {
    let cfg = small_config();
    let weights = jittered_weights(cfg, 3);
    let (_, g) = loss_and_gradients(&weights, &[1, 2, 3, 4], 2, &[0.5, 0.5], None, Trainable::NONE).unwrap();
    assert!(g.is_empty());
}

#[test]
fn parameters_above_the_loss_cut_get_zero_gradient() {
    // The edit on the last block only touches positions after the loss rows
    // that carry weight, so its gradient must vanish exactly.
    let cfg = small_config();
    let weights = jittered_weights(cfg, 4);
    let params = jittered_edit(cfg.embed_dim, &[1], 5);
    let tokens = [3, 7, 1, 12, 5, 9];
    let prompt_len = 2;
    // loss on response position 0 only -> logit row 1
    let lw = [1.0, 0.0, 0.0, 0.0];
    let edit = Edit {
        params: &params,
        mask: brep_core::PositionMask::From(2),
    };
    let (_, g) = loss_and_gradients(&weights, &tokens, prompt_len, &lw, Some(&edit), Trainable::INTERVENTION).unwrap();
    assert!(g.intervention.unwrap().iter().all(|&v| v == 0.0));
}

#[test]
fn total_loss_gradient_scales_by_weight() {
    let cfg = small_config();
    let weights = jittered_weights(cfg, 6);
    let params = jittered_edit(cfg.embed_dim, &[0, 1], 7);
    let tokens = [4, 6, 8, 10, 12];
    let scope = InterventionScope::all_positions();
    let edit = Edit::scoped(&params, scope, 2);
    let w = 0.037;
    let base_lw = prefix_weights(3, 3);
    let scaled_lw: Vec<f64> = base_lw.iter().map(|x| x * w).collect();
    let (_, g) = loss_and_gradients(&weights, &tokens, 2, &base_lw, Some(&edit), Trainable::INTERVENTION).unwrap();
    let (_, gw) = loss_and_gradients(&weights, &tokens, 2, &scaled_lw, Some(&edit), Trainable::INTERVENTION).unwrap();

    // finite differences on the weighted total loss
    let total = |p: &InterventionParams| {
        let e = Edit::scoped(p, scope, 2);
        let (l, _) = loss_and_gradients(&weights, &tokens, 2, &base_lw, Some(&e), Trainable::NONE).unwrap();
        brep_core::pid::total_loss(w, l)
    };
    let g = g.intervention.unwrap();
    let gw = gw.intervention.unwrap();
    let mut p = params.clone();
    for i in 0..p.data.len() {
        assert!(rel_err(gw[i], w * g[i]) < 1e-12);
        let orig = p.data[i];
        p.data[i] = orig + EPS;
        let up = total(&p);
        p.data[i] = orig - EPS;
        let down = total(&p);
        p.data[i] = orig;
        assert!(rel_err(gw[i], (up - down) / (2.0 * EPS)) < REL_TOL);
    }
}

#[test]
fn packed_batch_matches_per_sequence_sum() {
    use brep_core::model::{batch_loss_and_gradients, BatchItem};
    use brep_core::PositionMask;
    let cfg = ModelConfig {
        vocab_size: 16,
        embed_dim: 8,
        num_layers: 2,
        num_heads: 2,
        context_len: 12,
        seed: 2,
    };
    let weights = jittered_weights(cfg, 8);
    let params = jittered_edit(cfg.embed_dim, &[0, 1], 9);
    let seqs: [&[usize]; 3] = [&[1, 2, 3, 4, 5, 6], &[1, 2, 3, 9, 8], &[1, 2, 7, 7, 7, 7, 7]];
    let prompts = [4, 4, 3];
    let scope = InterventionScope::response_only(Some(2));
    let items: Vec<BatchItem> = seqs
        .iter()
        .zip(prompts)
        .map(|(s, p)| BatchItem {
            tokens: s,
            prompt_len: p,
            loss_weights: prefix_weights(s.len() - p, 2),
            mask: Some(PositionMask::Scoped { scope, prompt_len: p }),
        })
        .collect();
    let both = Trainable {
        base: true,
        intervention: true,
    };
    let (losses, packed) = batch_loss_and_gradients(&weights, &items, Some(&params), both).unwrap();

    let mut sum = brep_core::GradientSet::zeros(&weights, Some(&params), both);
    for (it, &l) in items.iter().zip(&losses) {
        let edit = Edit::scoped(&params, scope, it.prompt_len);
        let (single_loss, g) =
            loss_and_gradients(&weights, it.tokens, it.prompt_len, &it.loss_weights, Some(&edit), both).unwrap();
        assert!((single_loss - l).abs() < 1e-12);
        sum.add_assign(&g);
    }
    let a = packed.flatten();
    let b = sum.flatten();
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-12, "{x} vs {y}");
    }
}
