//! Synthetic addition corpus, response truncation, and the supervision
//! signal diagnostics that compare prefix and full-length normalisation.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::model::GradientSet;
use crate::ops;
use crate::tokenizer::{tokenize, EOS};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawExample {
    pub question: String,
    pub answer: String,
}

impl RawExample {
    pub fn addition(a: u64, b: u64) -> Self {
        Self {
            question: format!("What is the sum of {a} and {b}?"),
            answer: (a + b).to_string(),
        }
    }

    /// Recovers the two operands from a templated question.
    pub fn operands(&self) -> Option<(u64, u64)> {
        let rest = self.question.strip_prefix("What is the sum of ")?;
        let rest = rest.strip_suffix('?')?;
        let (a, b) = rest.split_once(" and ")?;
        Some((a.parse().ok()?, b.parse().ok()?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// One line of the JSON-lines corpus file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub question: String,
    pub answer: String,
    pub split: Split,
}

impl CorpusRecord {
    pub fn raw(&self) -> RawExample {
        RawExample {
            question: self.question.clone(),
            answer: self.answer.clone(),
        }
    }
}

fn random_operand(rng: &mut ChaCha8Rng, digit_min: u32, digit_max: u32) -> u64 {
    let digits = rng.gen_range(digit_min..=digit_max);
    let lo = if digits == 1 { 0 } else { 10u64.pow(digits - 1) };
    rng.gen_range(lo..10u64.pow(digits))
}

/// `count` addition problems whose operands have `digit_min..=digit_max`
/// digits (digit count drawn uniformly, then the value), split 80/10/10.
pub fn generate_arithmetic(seed: u64, count: usize, digit_min: u32, digit_max: u32) -> Result<Vec<CorpusRecord>> {
    if digit_min < 1 || digit_min > digit_max || digit_max > 19 {
        return Err(domain(format!(
            "digit range {digit_min}..={digit_max} must satisfy 1 <= min <= max <= 19"
        )));
    }
    if count == 0 {
        return Err(domain("corpus count must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let examples: Vec<RawExample> = (0..count)
        .map(|_| {
            let a = random_operand(&mut rng, digit_min, digit_max);
            let b = random_operand(&mut rng, digit_min, digit_max);
            RawExample::addition(a, b)
        })
        .collect();
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut rng);
    let n_train = count * 8 / 10;
    let n_val = count / 10;
    let mut split = vec![Split::Test; count];
    for (rank, &idx) in order.iter().enumerate() {
        split[idx] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Validation
        } else {
            Split::Test
        };
    }
    Ok(examples
        .into_iter()
        .zip(split)
        .map(|(e, split)| CorpusRecord {
            question: e.question,
            answer: e.answer,
            split,
        })
        .collect())
}

pub fn write_corpus(path: &Path, records: &[CorpusRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    crate::io::write_atomic(path, &buf)
}

pub fn read_corpus(path: &Path) -> Result<Vec<CorpusRecord>> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

pub fn split_of(records: &[CorpusRecord], split: Split) -> Vec<RawExample> {
    records
        .iter()
        .filter(|r| r.split == split)
        .map(CorpusRecord::raw)
        .collect()
}

/// A tokenized prompt/response pair with its truncation bookkeeping.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainExample {
    pub prompt_tokens: Vec<usize>,
    pub response_tokens: Vec<usize>,
    /// Truncation length actually used.
    pub l_p: usize,
    /// Length of the original, untruncated response.
    pub l_f: usize,
}

impl TrainExample {
    /// Full-length example; the response is the answer followed by EOS.
    pub fn from_raw(raw: &RawExample) -> Result<Self> {
        let prompt_tokens = tokenize(&raw.question)?;
        let mut response_tokens = tokenize(&raw.answer)?;
        response_tokens.push(EOS);
        Ok(Self::from_tokens(prompt_tokens, response_tokens))
    }

    pub fn from_tokens(prompt_tokens: Vec<usize>, response_tokens: Vec<usize>) -> Self {
        let l = response_tokens.len();
        Self {
            prompt_tokens,
            response_tokens,
            l_p: l,
            l_f: l,
        }
    }

    /// Prompt followed by response.
    pub fn sequence(&self) -> Vec<usize> {
        let mut s = self.prompt_tokens.clone();
        s.extend_from_slice(&self.response_tokens);
        s
    }
}

/// Keeps the first `min(k, l)` response tokens; the original `l_f` is kept.
pub fn truncate_response(example: &TrainExample, k: usize) -> Result<TrainExample> {
    if k == 0 {
        return Err(domain("truncation length must be at least 1"));
    }
    if example.response_tokens.is_empty() {
        return Err(domain("cannot truncate an empty response"));
    }
    let keep = k.min(example.response_tokens.len());
    Ok(TrainExample {
        prompt_tokens: example.prompt_tokens.clone(),
        response_tokens: example.response_tokens[..keep].to_vec(),
        l_p: keep,
        l_f: example.l_f,
    })
}

/// Per-token supervision difference `(1/l_p) log p - (1/l_f) log p`.
pub fn signal_ratio(logp: f64, l_p: usize, l_f: usize) -> Result<f64> {
    if l_p == 0 {
        return Err(domain("l_p must be at least 1"));
    }
    if l_p > l_f {
        return Err(domain(format!("l_p {l_p} exceeds l_f {l_f}")));
    }
    Ok(logp / l_p as f64 - logp / l_f as f64)
}

/// Sum of [`signal_ratio`] over the first `n` log-probabilities.
pub fn signal_cum(logps: &[f64], n: usize, l_p: usize, l_f: usize) -> Result<f64> {
    if n > logps.len() {
        return Err(domain(format!("n {n} exceeds {} log-probabilities", logps.len())));
    }
    logps[..n]
        .iter()
        .map(|&lp| signal_ratio(lp, l_p, l_f))
        .sum()
}

/// Cosine between the two flattened gradients and `‖rest‖ / ‖first_n‖`.
/// A zero `rest` gradient gives `(0, 0)`.
pub fn gradient_contamination(first_n: &GradientSet, rest: &GradientSet) -> Result<(f64, f64)> {
    let a = first_n.flatten();
    let b = rest.flatten();
    if a.len() != b.len() {
        return Err(Error::Shape {
            expected: a.len(),
            got: b.len(),
        });
    }
    let na = ops::norm(&a);
    if na == 0.0 {
        return Err(domain("first-n gradient has zero norm"));
    }
    let nb = ops::norm(&b);
    if nb == 0.0 {
        return Ok((0.0, 0.0));
    }
    Ok((ops::dot(&a, &b) / (na * nb), nb / na))
}

/// Writes one JSON value per line.
pub fn write_jsonl<T: Serialize>(out: &mut impl Write, rows: &[T]) -> Result<()> {
    for r in rows {
        serde_json::to_writer(&mut *out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn corpus_is_seeded() {
        let a = generate_arithmetic(7, 200, 2, 4).unwrap();
        let b = generate_arithmetic(7, 200, 2, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_arithmetic(8, 200, 2, 4).unwrap());
    }

    #[test]
    fn answers_are_sums() {
        for seed in 0..20 {
            for r in generate_arithmetic(seed, 50, 1, 1).unwrap() {
                let (x, y) = r.raw().operands().unwrap();
                assert!(x < 10 && y < 10);
                assert_eq!(r.answer, (x + y).to_string());
            }
        }
        for r in generate_arithmetic(3, 500, 2, 10).unwrap() {
            let (x, y) = r.raw().operands().unwrap();
            assert!((10..10_000_000_000).contains(&x));
            assert_eq!(r.answer.parse::<u64>().unwrap(), x + y);
        }
    }

    #[test]
    fn split_sizes() {
        let c = generate_arithmetic(1, 1000, 2, 4).unwrap();
        let count = |s| c.iter().filter(|r| r.split == s).count();
        assert_eq!(count(Split::Train), 800);
        assert_eq!(count(Split::Validation), 100);
        assert_eq!(count(Split::Test), 100);
    }

    #[test]
    fn bad_digit_ranges() {
        assert!(generate_arithmetic(0, 10, 0, 3).is_err());
        assert!(generate_arithmetic(0, 10, 4, 3).is_err());
        assert!(generate_arithmetic(0, 0, 1, 3).is_err());
    }

    fn example(len: usize) -> TrainExample {
        TrainExample::from_tokens(vec![13], (2..2 + len).collect())
    }

    #[test]
    fn truncation_examples() {
        let e = example(5);
        let t = truncate_response(&e, 9).unwrap();
        assert_eq!(t.response_tokens, e.response_tokens);
        assert_eq!((t.l_p, t.l_f), (5, 5));

        let long = example(100);
        let t = truncate_response(&long, 64).unwrap();
        assert_eq!((t.l_p, t.l_f, t.response_tokens.len()), (64, 100, 64));

        let t = truncate_response(&e, 3).unwrap();
        assert_eq!(t.response_tokens, vec![2, 3, 4]);
        assert_eq!((t.l_p, t.l_f), (3, 5));

        assert!(truncate_response(&example(0), 3).is_err());
        assert!(truncate_response(&e, 0).is_err());
    }

    #[test]
    fn signal_examples() {
        assert_eq!(signal_ratio(-2.3, 4, 4).unwrap(), 0.0);
        assert!((signal_ratio(-1.0, 2, 4).unwrap() + 0.25).abs() < 1e-15);
        for &lp in &[-0.1, -1.0, -7.5] {
            let ratio = (lp / 3.0f64).abs() / (lp / 12.0f64).abs();
            assert!((ratio - 4.0).abs() < 1e-12);
        }
        assert!(signal_ratio(-1.0, 0, 4).is_err());
        assert!(signal_ratio(-1.0, 5, 4).is_err());
        let cum = signal_cum(&[-1.0, -2.0, -3.0], 2, 2, 4).unwrap();
        assert!((cum - (-0.25 - 0.5)).abs() < 1e-15);
    }

    #[test]
    fn contamination_examples() {
        let g = GradientSet {
            base: None,
            intervention: Some(vec![0.5, -1.0, 2.0]),
        };
        let zero = GradientSet {
            base: None,
            intervention: Some(vec![0.0; 3]),
        };
        assert_eq!(gradient_contamination(&g, &zero).unwrap(), (0.0, 0.0));
        let (cos, ratio) = gradient_contamination(&g, &g).unwrap();
        assert!((cos - 1.0).abs() < 1e-12 && (ratio - 1.0).abs() < 1e-12);
        assert!(gradient_contamination(&zero, &g).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        let c = generate_arithmetic(5, 30, 2, 3).unwrap();
        write_corpus(&path, &c).unwrap();
        assert_eq!(read_corpus(&path).unwrap(), c);
        let first = std::fs::read_to_string(&path).unwrap();
        assert!(first.lines().next().unwrap().starts_with("{\"question\":\"What is the sum of "));
    }

    proptest! {
        #[test]
        fn truncation_is_idempotent(len in 1usize..40, k in 1usize..50) {
            let once = truncate_response(&example(len), k).unwrap();
            let twice = truncate_response(&once, k).unwrap();
            prop_assert_eq!(once, twice);
        }
    }
}
