//! Training loops on a small model: identities, replay, determinism.

use brep_core::checkpoint::{load_model, save_model};
use brep_core::data::{generate_arithmetic, split_of, Split, TrainExample};
use brep_core::metrics::{RunMetrics, StepRecord};
use brep_core::pid::replay;
use brep_core::train::{train_base, train_intervention, EvalPlan, InterventionTrainConfig, OptimConfig};
use brep_core::{BaseWeights, Error, ModelConfig, PidGains};

fn small() -> ModelConfig {
    ModelConfig {
        vocab_size: 32,
        embed_dim: 16,
        num_layers: 2,
        num_heads: 2,
        context_len: 48,
        seed: 3,
    }
}

fn examples(split: Split, n: usize) -> Vec<TrainExample> {
    let corpus = generate_arithmetic(5, 400, 2, 3).unwrap();
    split_of(&corpus, split)
        .iter()
        .take(n)
        .map(|r| TrainExample::from_raw(r).unwrap())
        .collect()
}

fn optim(steps: usize, lr: f64) -> OptimConfig {
    OptimConfig {
        lr,
        steps,
        batch_size: 8,
        warmup: 0,
        cosine: false,
        clip: None,
        seed: 9,
    }
}

fn base() -> BaseWeights {
    BaseWeights::init(small()).unwrap()
}

#[test]
fn zero_steps_leave_identity() {
    let train = examples(Split::Train, 50);
    let w = base();
    let cfg = InterventionTrainConfig::brep(vec![0, 1], 4, optim(0, 1e-2), PidGains::default());
    let (params, metrics) = train_intervention(&w, &train, &cfg, None).unwrap();
    assert!(params.is_identity());
    assert!(metrics.steps.is_empty() && metrics.is_complete(0));
    let (w2, m) = train_base(w.clone(), &train, &optim(0, 1e-2), None).unwrap();
    assert_eq!(w2.data, w.data);
    assert!(m.steps.is_empty());
}

#[test]
fn logged_pid_trace_replays_exactly() {
    let train = examples(Split::Train, 80);
    let gains = PidGains {
        b_target: 0.05,
        ..PidGains::default()
    };
    let cfg = InterventionTrainConfig::brep(vec![0, 1], 4, optim(40, 2e-2), gains);
    let (_, metrics) = train_intervention(&base(), &train, &cfg, None).unwrap();
    let parsed: Vec<StepRecord> = metrics
        .to_jsonl()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(parsed, metrics.steps);
    let errors: Vec<f64> = parsed.iter().map(|s| s.error.unwrap()).collect();
    let ws = replay(&errors, gains.w_init, &gains).unwrap();
    for (i, s) in parsed.iter().enumerate() {
        assert_eq!(ws[i], s.w_next.unwrap(), "step {i}");
        let expected_w = if i == 0 { gains.w_init } else { ws[i - 1] };
        assert_eq!(s.w, expected_w);
        assert!(s.w >= gains.w_min && s.w <= gains.w_max);
        assert_eq!(s.error.unwrap(), gains.b_target - s.bias_norm.unwrap());
    }
}

#[test]
fn modes_agree_when_constraints_are_lifted() {
    let train = examples(Split::Train, 60);
    let w = base();
    let longest = train.iter().map(|e| e.response_tokens.len()).max().unwrap();
    let mut brep = InterventionTrainConfig::brep(vec![0, 1], longest, optim(3, 1e-2), PidGains::default());
    brep.pid = None;
    let reft = InterventionTrainConfig::reft_full(vec![0, 1], optim(3, 1e-2));
    let (pa, ma) = train_intervention(&w, &train, &brep, None).unwrap();
    let (pb, mb) = train_intervention(&w, &train, &reft, None).unwrap();
    assert_eq!(ma.steps, mb.steps);
    assert_eq!(pa.data, pb.data);

    // with a real cap the first step sees a different loss
    let mut capped = brep.clone();
    capped.k = Some(2);
    let (_, mc) = train_intervention(&w, &train, &capped, None).unwrap();
    assert_ne!(mc.steps[0].loss_ce, mb.steps[0].loss_ce);
}

#[test]
fn brep_keeps_base_frozen_and_metrics_complete() {
    let train = examples(Split::Train, 60);
    let val = examples(Split::Validation, 10);
    let w = base();
    let digest = w.digest();
    let cfg = InterventionTrainConfig::brep(vec![1], 4, optim(12, 1e-2), PidGains::default());
    let (params, metrics) = train_intervention(&w, &train, &cfg, Some(EvalPlan { examples: &val, every: 5 })).unwrap();
    assert_eq!(w.digest(), digest);
    assert!(metrics.is_complete(12));
    assert!(!params.is_identity());
    assert_eq!(metrics.evals.iter().map(|e| e.step).collect::<Vec<_>>(), vec![4, 9, 11]);
    assert!(metrics.evals.iter().all(|e| e.exact_match.is_some() && (0.0..=1.0).contains(&e.token_accuracy)));
    let reparsed: Vec<_> = metrics.to_jsonl().lines().map(String::from).collect();
    assert_eq!(reparsed.len(), 12 + metrics.evals.len());

    let mut bad = cfg.clone();
    bad.layers = vec![7];
    assert!(matches!(train_intervention(&w, &train, &bad, None), Err(Error::Config(_))));
    assert!(train_intervention(&w, &[], &cfg, None).is_err());
}

#[test]
fn freeze_scale_only_moves_bias() {
    let train = examples(Split::Train, 40);
    let mut cfg = InterventionTrainConfig::reft_full(vec![0, 1], optim(5, 1e-2));
    cfg.freeze_scale = true;
    let (params, _) = train_intervention(&base(), &train, &cfg, None).unwrap();
    for s in 0..2 {
        assert!(params.scale(s).iter().all(|&v| v == 1.0));
    }
    assert!(params.concat_bias().iter().any(|&v| v != 0.0));
}

#[test]
fn base_training_is_bit_reproducible() {
    let train = examples(Split::Train, 100);
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let (w, m) = train_base(base(), &train, &optim(15, 3e-3), None).unwrap();
        let path = dir.path().join(name);
        save_model(&w, &path).unwrap();
        (std::fs::read(&path).unwrap(), m)
    };
    let (a, ma) = run("a.ckpt");
    let (b, mb) = run("b.ckpt");
    assert_eq!(a, b);
    assert_eq!(ma, mb);
    let loaded = load_model(&dir.path().join("a.ckpt")).unwrap();
    assert_eq!(loaded.digest(), train_base(base(), &train, &optim(15, 3e-3), None).unwrap().0.digest());
}

#[test]
fn base_loss_decreases() {
    let train = examples(Split::Train, 200);
    let mut opt = optim(150, 3e-3);
    opt.clip = Some(1.0);
    let (_, m): (_, RunMetrics) = train_base(base(), &train, &opt, None).unwrap();
    let mean = |s: &[StepRecord]| s.iter().map(|r| r.loss_ce).sum::<f64>() / s.len() as f64;
    let first = mean(&m.steps[..20]);
    let last = mean(&m.steps[130..]);
    assert!(last < 0.7 * first, "loss {first} -> {last}");
    assert!(m.is_complete(150));
}
