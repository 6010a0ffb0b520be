use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{forward, BaseWeights};
use crate::error::{domain, Error, Result};
use crate::intervention::Edit;
use crate::tokenizer::EOS;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecodeMode {
    Greedy,
    Sample { temperature: f64, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeOptions {
    pub mode: DecodeMode,
    pub max_new: usize,
    /// Forbid any continuation that repeats an n-gram already in the sequence.
    pub ngram_block: Option<usize>,
}

impl DecodeOptions {
    pub fn greedy(max_new: usize) -> Self {
        Self {
            mode: DecodeMode::Greedy,
            max_new,
            ngram_block: None,
        }
    }

    pub fn sample(max_new: usize, temperature: f64, seed: u64) -> Self {
        Self {
            mode: DecodeMode::Sample { temperature, seed },
            max_new,
            ngram_block: None,
        }
    }
}

/// Tokens that would complete an n-gram already present in `seq`.
pub(crate) fn blocked_tokens(seq: &[usize], n: usize) -> Vec<usize> {
    if n == 0 || seq.len() + 1 < n {
        return Vec::new();
    }
    if n == 1 {
        return seq.to_vec();
    }
    let tail = &seq[seq.len() + 1 - n..];
    seq.windows(n)
        .filter(|w| &w[..n - 1] == tail)
        .map(|w| w[n - 1])
        .collect()
}

/// Picks the next token from one logit row with the banned entries removed.
pub(crate) fn select_token(
    logits: &[f64],
    banned: &[usize],
    mode: DecodeMode,
    rng: &mut ChaCha8Rng,
) -> Option<usize> {
    let allowed = |i: usize| !banned.contains(&i);
    match mode {
        DecodeMode::Greedy => {
            let mut best: Option<(usize, f64)> = None;
            for (i, &l) in logits.iter().enumerate() {
                if allowed(i) && best.map_or(true, |(_, b)| l > b) {
                    best = Some((i, l));
                }
            }
            best.map(|(i, _)| i)
        }
        DecodeMode::Sample { temperature, .. } => {
            let max = logits
                .iter()
                .enumerate()
                .filter(|(i, _)| allowed(*i))
                .map(|(_, &l)| l)
                .fold(f64::NEG_INFINITY, f64::max);
            if !max.is_finite() {
                return None;
            }
            let probs: Vec<f64> = logits
                .iter()
                .enumerate()
                .map(|(i, &l)| {
                    if allowed(i) {
                        ((l - max) / temperature).exp()
                    } else {
                        0.0
                    }
                })
                .collect();
            let dist = WeightedIndex::new(&probs).ok()?;
            Some(dist.sample(rng))
        }
    }
}

/// Autoregressive generation of up to `max_new` tokens after `prompt`.
///
/// The returned tokens include the end-of-sequence token when one was
/// produced. The edit mask is interpreted in absolute sequence positions, so
/// callers build it with `prompt_len = prompt.len()`.
pub fn decode(
    weights: &BaseWeights,
    edit: Option<&Edit<'_>>,
    prompt: &[usize],
    opts: &DecodeOptions,
) -> Result<Vec<usize>> {
    if prompt.is_empty() {
        return Err(domain("decode needs a non-empty prompt"));
    }
    let ctx = weights.config.context_len;
    if prompt.len() > ctx {
        return Err(Error::Length {
            len: prompt.len(),
            max: ctx,
        });
    }
    let seed = match opts.mode {
        DecodeMode::Greedy => 0,
        DecodeMode::Sample { temperature, seed } => {
            if !(temperature > 0.0) {
                return Err(domain("sampling temperature must be positive"));
            }
            seed
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = weights.config.vocab_size;
    let mut seq = prompt.to_vec();
    let mut out = Vec::new();
    while out.len() < opts.max_new && seq.len() < ctx {
        let trace = forward(weights, &seq, edit)?;
        let row = trace.logits_row(seq.len() - 1, vocab);
        let banned = opts
            .ngram_block
            .map(|n| blocked_tokens(&seq, n))
            .unwrap_or_default();
        let Some(next) = select_token(row, &banned, opts.mode, &mut rng) else {
            break;
        };
        seq.push(next);
        out.push(next);
        if next == EOS {
            break;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bigram_blocking_after_cycle() {
        let (a, b) = (3, 4);
        // "a b a" followed by "b" would repeat the bigram "a b"
        assert_eq!(blocked_tokens(&[a, b, a], 2), vec![b]);
        assert!(blocked_tokens(&[a, b], 2).is_empty());
        assert_eq!(blocked_tokens(&[a, b, a, b], 3), vec![a]);
    }

    #[test]
    fn greedy_skips_banned_argmax() {
        // hand-built 2-token cycle: the argmax after `a` is `b`, runner-up `c`
        let (a, b, c) = (0, 1, 2);
        let after_a = [0.0, 5.0, 4.0];
        let after_b = [5.0, 0.0, 1.0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut seq = vec![a];
        for _ in 0..3 {
            let row = if *seq.last().unwrap() == a { &after_a } else { &after_b };
            let banned = blocked_tokens(&seq, 2);
            seq.push(select_token(row, &banned, DecodeMode::Greedy, &mut rng).unwrap());
        }
        assert_eq!(seq, vec![a, b, a, c]);
    }

    #[test]
    fn sampling_never_picks_banned() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mode = DecodeMode::Sample {
            temperature: 0.6,
            seed: 9,
        };
        for _ in 0..200 {
            let t = select_token(&[3.0, 3.0, -1.0], &[0], mode, &mut rng).unwrap();
            assert_ne!(t, 0);
        }
        assert_eq!(select_token(&[1.0, 2.0], &[0, 1], mode, &mut rng), None);
    }
}
