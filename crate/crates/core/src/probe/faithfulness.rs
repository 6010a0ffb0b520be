use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::RawExample;
use crate::error::{check_len, domain, Result};
use crate::eval::Steering;
use crate::model::{forward, BaseWeights};
use crate::ops::dot;
use crate::tokenizer::tokenize;

/// Column labels of a faithfulness accuracy matrix.
pub const GAP_COLUMNS: [&str; 3] = ["last_input", "answer_first", "answer_last"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaithfulnessProbe {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub layer: usize,
    /// Held-out accuracy.
    pub accuracy: f64,
}

impl FaithfulnessProbe {
    pub fn predict(&self, h: &[f64]) -> Result<bool> {
        check_len(self.weights.len(), h.len())?;
        Ok(dot(&self.weights, h) + self.intercept > 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogisticConfig {
    pub lr: f64,
    pub iters: usize,
    pub l2: f64,
    /// Share of each class used for fitting; the rest is held out.
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        Self {
            lr: 0.5,
            iters: 500,
            l2: 1e-3,
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Logistic-regression probe fitted by full-batch gradient descent on
/// standardized features, with a per-class seeded train/held-out split.
pub fn fit_faithfulness_probe(
    h: &[Vec<f64>],
    labels: &[bool],
    layer: usize,
    cfg: &LogisticConfig,
) -> Result<FaithfulnessProbe> {
    check_len(h.len(), labels.len())?;
    if h.len() < 10 {
        return Err(domain("faithfulness probe needs at least 10 rows"));
    }
    let d = h[0].len();
    for r in h {
        check_len(d, r.len())?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for class in [false, true] {
        let mut idx: Vec<usize> = (0..h.len()).filter(|&i| labels[i] == class).collect();
        if idx.is_empty() {
            return Err(domain("faithfulness labels contain a single class"));
        }
        idx.shuffle(&mut rng);
        let cut = ((idx.len() as f64 * cfg.train_fraction).round() as usize).clamp(1, idx.len());
        test.extend_from_slice(&idx[cut..]);
        train.extend_from_slice(&idx[..cut]);
    }
    if test.is_empty() {
        return Err(domain("held-out split is empty"));
    }
    train.sort_unstable();
    test.sort_unstable();

    let n = train.len() as f64;
    let mut mean = vec![0.0; d];
    for &i in &train {
        for (m, v) in mean.iter_mut().zip(&h[i]) {
            *m += v / n;
        }
    }
    let mut std = vec![0.0; d];
    for &i in &train {
        for ((s, v), m) in std.iter_mut().zip(&h[i]).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    for s in &mut std {
        *s = if *s > 1e-24 { s.sqrt() } else { 1.0 };
    }
    let z: Vec<Vec<f64>> = train
        .iter()
        .map(|&i| h[i].iter().zip(&mean).zip(&std).map(|((v, m), s)| (v - m) / s).collect())
        .collect();
    let y: Vec<f64> = train.iter().map(|&i| labels[i] as u8 as f64).collect();

    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut gw = vec![0.0; d];
    for _ in 0..cfg.iters {
        gw.iter_mut().zip(&w).for_each(|(g, w)| *g = cfg.l2 * w);
        let mut gb = 0.0;
        for (zi, yi) in z.iter().zip(&y) {
            let r = (sigmoid(dot(&w, zi) + b) - yi) / n;
            for (g, v) in gw.iter_mut().zip(zi) {
                *g += r * v;
            }
            gb += r;
        }
        for (w, g) in w.iter_mut().zip(&gw) {
            *w -= cfg.lr * g;
        }
        b -= cfg.lr * gb;
    }
    let weights: Vec<f64> = w.iter().zip(&std).map(|(w, s)| w / s).collect();
    let intercept = b - dot(&weights, &mean);
    let mut probe = FaithfulnessProbe {
        weights,
        intercept,
        layer,
        accuracy: 0.0,
    };
    let mut hit = 0;
    for &i in &test {
        hit += (probe.predict(&h[i])? == labels[i]) as usize;
    }
    probe.accuracy = hit as f64 / test.len() as f64;
    Ok(probe)
}

/// Replaces one digit of `answer` with a different digit; the leading digit
/// of a multi-digit number never becomes zero.
pub fn perturb_answer(answer: &str, rng: &mut ChaCha8Rng) -> String {
    let mut digits: Vec<u8> = answer.bytes().collect();
    let i = rng.gen_range(0..digits.len());
    let lo = if i == 0 && digits.len() > 1 { 1 } else { 0 };
    let old = digits[i] - b'0';
    let mut new = rng.gen_range(lo..9);
    if new >= old {
        new += 1;
    }
    digits[i] = b'0' + new;
    String::from_utf8(digits).expect("ascii digits")
}

/// `(question, continuation, consistent)` triples: each question is paired
/// with either its correct answer or a perturbed one, by seeded coin flip.
pub fn faithfulness_dataset(examples: &[RawExample], seed: u64) -> Vec<(String, String, bool)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    examples
        .iter()
        .map(|ex| {
            let consistent = rng.gen_bool(0.5);
            let answer = if consistent {
                ex.answer.clone()
            } else {
                perturb_answer(&ex.answer, &mut rng)
            };
            (ex.question.clone(), answer, consistent)
        })
        .collect()
}

/// Held-out probe accuracy for every block (rows) and every position in
/// [`GAP_COLUMNS`] (columns).
pub fn faithfulness_matrix(
    weights: &BaseWeights,
    steering: Option<Steering<'_>>,
    examples: &[RawExample],
    cfg: &LogisticConfig,
) -> Result<Vec<Vec<f64>>> {
    let layers = weights.config.num_layers;
    let data = faithfulness_dataset(examples, cfg.seed);
    // features[layer][column] -> rows
    let mut features = vec![vec![Vec::with_capacity(data.len()); GAP_COLUMNS.len()]; layers];
    let mut labels = Vec::with_capacity(data.len());
    for (q, a, consistent) in &data {
        let prompt = tokenize(q)?;
        let answer = tokenize(a)?;
        let p = prompt.len();
        let cols = [p - 1, p, p + answer.len() - 1];
        let mut seq = prompt;
        seq.extend_from_slice(&answer);
        let edit = steering.map(|s| s.edit(p));
        let trace = forward(weights, &seq, edit.as_ref())?;
        for (l, per_layer) in features.iter_mut().enumerate() {
            for (c, &pos) in cols.iter().enumerate() {
                per_layer[c].push(trace.activations.row(l + 1, pos).to_vec());
            }
        }
        labels.push(*consistent);
    }
    features
        .iter()
        .enumerate()
        .map(|(l, per_layer)| {
            per_layer
                .iter()
                .map(|h| fit_faithfulness_probe(h, &labels, l, cfg).map(|p| p.accuracy))
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn separable_data_is_learned() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut h = Vec::new();
        let mut y = Vec::new();
        for i in 0..200 {
            let label = i % 2 == 0;
            let x0: f64 = StandardNormal.sample(&mut rng);
            let shift = if label { 3.0 } else { -3.0 };
            h.push(vec![x0, shift + 0.1 * x0]);
            y.push(label);
        }
        let p = fit_faithfulness_probe(&h, &y, 0, &LogisticConfig::default()).unwrap();
        assert_eq!(p.accuracy, 1.0);
    }

    #[test]
    fn single_class_is_rejected() {
        let h = vec![vec![1.0]; 12];
        assert!(fit_faithfulness_probe(&h, &[true; 12], 0, &LogisticConfig::default()).is_err());
        assert!(fit_faithfulness_probe(&h[..5], &[true, false, true, false, true], 0, &LogisticConfig::default()).is_err());
    }

    #[test]
    fn perturbed_answers_differ() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for a in ["0", "7", "10", "19", "100", "98765"] {
            for _ in 0..50 {
                let p = perturb_answer(a, &mut rng);
                assert_ne!(p, a);
                assert_eq!(p.len(), a.len());
                assert!(p.len() == 1 || !p.starts_with('0'));
            }
        }
    }
}
