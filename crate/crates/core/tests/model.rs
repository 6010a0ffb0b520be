//! Forward pass against a naive re-implementation, plus identity, causality
//! and decode determinism.

use brep_core::model::{decode, forward, DecodeOptions};
use brep_core::{BaseWeights, Edit, Error, InterventionParams, InterventionScope, ModelConfig, PositionMask};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn jittered(cfg: ModelConfig, seed: u64, amount: f64) -> BaseWeights {
    let mut w = BaseWeights::init(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in &mut w.data {
        *v += rng.gen_range(-amount..amount);
    }
    w
}

fn tensor<'a>(w: &'a BaseWeights, name: &str) -> &'a [f64] {
    let (_, r, _) = w.layout.entries.iter().find(|(n, _, _)| n == name).unwrap();
    &w.data[r.clone()]
}

/// `x (n) · m (n×k)` with `m` row-major.
fn vecmat(x: &[f64], m: &[f64], k: usize) -> Vec<f64> {
    (0..k).map(|j| x.iter().enumerate().map(|(i, xi)| xi * m[i * k + j]).sum()).collect()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) / (var + 1e-5).sqrt() * g[i] + b[i])
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Rotary encoding by complex multiplication of consecutive pairs.
fn rope(v: &[f64], pos: usize) -> Vec<f64> {
    let hd = v.len();
    let mut out = vec![0.0; hd];
    for i in 0..hd / 2 {
        let theta = pos as f64 / 10_000f64.powf(2.0 * i as f64 / hd as f64);
        let (re, im) = (v[2 * i], v[2 * i + 1]);
        out[2 * i] = re * theta.cos() - im * theta.sin();
        out[2 * i + 1] = re * theta.sin() + im * theta.cos();
    }
    out
}

/// Straightforward per-position evaluation of the whole model.
fn naive_logits(w: &BaseWeights, tokens: &[usize]) -> Vec<Vec<f64>> {
    let c = w.config;
    let (d, hd) = (c.embed_dim, c.head_dim());
    let mut h: Vec<Vec<f64>> = tokens
        .iter()
        .enumerate()
        .map(|(p, &t)| add(&tensor(w, "token_embed")[t * d..(t + 1) * d], &tensor(w, "pos_embed")[p * d..(p + 1) * d]))
        .collect();
    for l in 0..c.num_layers {
        let name = |s: &str| format!("block{l}.{s}");
        let qkv: Vec<Vec<f64>> = h
            .iter()
            .map(|x| {
                let n = layer_norm(x, tensor(w, &name("ln1_gain")), tensor(w, &name("ln1_bias")));
                add(&vecmat(&n, tensor(w, &name("qkv_weight")), 3 * d), tensor(w, &name("qkv_bias")))
            })
            .collect();
        let mut next = Vec::new();
        for t in 0..tokens.len() {
            let mut ctx = vec![0.0; d];
            for head in 0..c.num_heads {
                let sl = |v: &Vec<f64>, part: usize| v[part * d + head * hd..part * d + (head + 1) * hd].to_vec();
                let q = rope(&sl(&qkv[t], 0), t);
                let scores: Vec<f64> = (0..=t)
                    .map(|s| {
                        let k = rope(&sl(&qkv[s], 1), s);
                        q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>() / (hd as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                for (s, sc) in scores.iter().enumerate() {
                    let p = (sc - m).exp() / z;
                    for (i, v) in sl(&qkv[s], 2).iter().enumerate() {
                        ctx[head * hd + i] += p * v;
                    }
                }
            }
            let a = add(&vecmat(&ctx, tensor(w, &name("attn_out_weight")), d), tensor(w, &name("attn_out_bias")));
            let y = add(&h[t], &a);
            let n2 = layer_norm(&y, tensor(w, &name("ln2_gain")), tensor(w, &name("ln2_bias")));
            let pre = add(&vecmat(&n2, tensor(w, &name("fc_weight")), 4 * d), tensor(w, &name("fc_bias")));
            let act: Vec<f64> = pre.into_iter().map(gelu).collect();
            let f = add(&vecmat(&act, tensor(w, &name("proj_weight")), d), tensor(w, &name("proj_bias")));
            next.push(add(&y, &f));
        }
        h = next;
    }
    h.iter().map(|x| vecmat(x, tensor(w, "output"), c.vocab_size)).collect()
}

fn assert_close(fast: &[f64], slow: &[Vec<f64>], tol: f64) {
    let v = slow[0].len();
    for (t, row) in slow.iter().enumerate() {
        for (j, want) in row.iter().enumerate() {
            let got = fast[t * v + j];
            assert!((got - want).abs() <= tol * want.abs().max(1.0), "logit ({t},{j}): {got} vs {want}");
        }
    }
}

#[test]
fn single_token_two_dim_model_matches_hand_evaluation() {
    let cfg = ModelConfig {
        vocab_size: 3,
        embed_dim: 2,
        num_layers: 1,
        num_heads: 1,
        context_len: 4,
        seed: 5,
    };
    let w = jittered(cfg, 9, 0.7);
    for tok in 0..3 {
        let trace = forward(&w, &[tok], None).unwrap();
        assert_close(&trace.logits, &naive_logits(&w, &[tok]), 1e-12);
    }
}

#[test]
fn multi_token_multi_head_matches_naive_model() {
    let cfg = ModelConfig {
        vocab_size: 7,
        embed_dim: 8,
        num_layers: 2,
        num_heads: 2,
        context_len: 8,
        seed: 2,
    };
    let w = jittered(cfg, 4, 0.4);
    let tokens = [1, 5, 2, 6, 0, 3];
    let trace = forward(&w, &tokens, None).unwrap();
    assert_close(&trace.logits, &naive_logits(&w, &tokens), 1e-11);
    assert_eq!(trace.activations.num_layers(), 2);
    assert_eq!(trace.activations.layer(0).len(), tokens.len() * 8);
}

#[test]
fn identity_edit_is_exact() {
    let cfg = ModelConfig::default();
    let w = jittered(cfg, 1, 0.05);
    let tokens: Vec<usize> = (0..40).map(|i| (i * 7) % 28).collect();
    let params = InterventionParams::all_layers(cfg.embed_dim, cfg.num_layers);
    let edit = Edit::scoped(&params, InterventionScope::all_positions(), 10);
    let a = forward(&w, &tokens, None).unwrap();
    let b = forward(&w, &tokens, Some(&edit)).unwrap();
    assert_eq!(a.logits, b.logits);
    for j in 0..=cfg.num_layers {
        assert_eq!(a.activations.layer(j), b.activations.layer(j));
    }
}

#[test]
fn causal_masking() {
    let cfg = ModelConfig {
        embed_dim: 16,
        num_layers: 2,
        num_heads: 2,
        context_len: 32,
        ..ModelConfig::default()
    };
    let w = jittered(cfg, 3, 0.1);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let tokens: Vec<usize> = (0..20).map(|_| rng.gen_range(0..28)).collect();
    let base = forward(&w, &tokens, None).unwrap();
    let v = cfg.vocab_size;
    for t in [0, 5, 19] {
        let mut changed = tokens.clone();
        changed[t] = (changed[t] + 1) % 28;
        let other = forward(&w, &changed, None).unwrap();
        assert_eq!(&base.logits[..t * v], &other.logits[..t * v], "position {t} leaked backwards");
        assert_ne!(&base.logits[t * v..(t + 1) * v], &other.logits[t * v..(t + 1) * v]);
    }
}

#[test]
fn precondition_errors() {
    let cfg = ModelConfig {
        context_len: 4,
        ..ModelConfig::default()
    };
    let w = BaseWeights::init(cfg).unwrap();
    assert!(matches!(forward(&w, &[1, 2, 3, 4, 5], None), Err(Error::Length { len: 5, max: 4 })));
    assert!(matches!(forward(&w, &[40], None), Err(Error::Token { .. })));
    assert!(decode(&w, None, &[], &DecodeOptions::greedy(2)).is_err());
    assert!(decode(&w, None, &[1], &DecodeOptions::sample(2, 0.0, 1)).is_err());
    let bad = ModelConfig {
        embed_dim: 6,
        num_heads: 4,
        ..ModelConfig::default()
    };
    assert!(BaseWeights::init(bad).is_err());
}

#[test]
fn decoding_is_deterministic() {
    let w = jittered(ModelConfig::default(), 6, 0.2);
    let prompt = [15, 20, 16, 26, 12, 3, 4];
    let g = DecodeOptions::greedy(12);
    assert_eq!(decode(&w, None, &prompt, &g).unwrap(), decode(&w, None, &prompt, &g).unwrap());
    let s = DecodeOptions::sample(12, 0.6, 42);
    let first = decode(&w, None, &prompt, &s).unwrap();
    assert_eq!(first, decode(&w, None, &prompt, &s).unwrap());
    let other_seeds: Vec<Vec<usize>> = (0..8).map(|k| decode(&w, None, &prompt, &DecodeOptions::sample(12, 0.6, k)).unwrap()).collect();
    assert!(other_seeds.iter().any(|o| *o != first), "sampling ignores the seed");
}

#[test]
fn decode_stops_at_context_and_respects_ngram_block() {
    let cfg = ModelConfig {
        context_len: 10,
        ..ModelConfig::default()
    };
    let w = jittered(cfg, 2, 0.3);
    let out = decode(&w, None, &[3, 4, 5], &DecodeOptions::greedy(50)).unwrap();
    assert!(out.len() <= 7);
    let mut opts = DecodeOptions::greedy(7);
    opts.ngram_block = Some(2);
    let out = decode(&w, None, &[3, 4, 5], &opts).unwrap();
    let mut seq = vec![3, 4, 5];
    seq.extend(&out);
    let bigrams: Vec<_> = seq.windows(2).collect();
    for (i, b) in bigrams.iter().enumerate() {
        assert!(!bigrams[..i].contains(b), "bigram {b:?} repeated in {seq:?}");
    }
}

#[test]
fn zero_prefix_edit_changes_nothing() {
    let w = jittered(ModelConfig::default(), 7, 0.1);
    let mut params = InterventionParams::all_layers(64, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for v in &mut params.data {
        *v += rng.gen_range(-1.0..1.0);
    }
    let prompt = [15, 20, 16, 26, 12, 3, 4, 13];
    let opts = DecodeOptions::greedy(10);
    let plain = decode(&w, None, &prompt, &opts).unwrap();
    let n0 = Edit::scoped(&params, InterventionScope::response_only(Some(0)), prompt.len());
    assert_eq!(decode(&w, Some(&n0), &prompt, &opts).unwrap(), plain);
    let full = Edit::scoped(&params, InterventionScope::response_only(None), prompt.len());
    let capped = Edit::scoped(&params, InterventionScope::response_only(Some(10)), prompt.len());
    assert_eq!(
        decode(&w, Some(&full), &prompt, &opts).unwrap(),
        decode(&w, Some(&capped), &prompt, &opts).unwrap()
    );
    let from = Edit {
        params: &params,
        mask: PositionMask::From(0),
    };
    assert_ne!(forward(&w, &prompt, Some(&from)).unwrap().logits, forward(&w, &prompt, None).unwrap().logits);
}
