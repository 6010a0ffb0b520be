//! Exact-match evaluation and prefix-guided continuation.

use serde::{Deserialize, Serialize};

use crate::data::{RawExample, TrainExample};
use crate::error::{domain, Error, Result};
use crate::intervention::{Edit, InterventionParams, InterventionScope};
use crate::model::{decode, BaseWeights, DecodeOptions};
use crate::tokenizer::{detokenize, is_digit, tokenize, EOS};

/// Final maximal digit run of a decoded response. Runs too long for `u128`
/// count as unparseable.
pub fn parse_answer(tokens: &[usize]) -> Option<u128> {
    let end = tokens.iter().rposition(|&t| is_digit(t))? + 1;
    let start = tokens[..end]
        .iter()
        .rposition(|&t| !is_digit(t))
        .map_or(0, |i| i + 1);
    detokenize(&tokens[start..end]).parse().ok()
}

/// A trained edit with the scope it is applied under.
#[derive(Debug, Clone, Copy)]
pub struct Steering<'a> {
    pub params: &'a InterventionParams,
    pub scope: InterventionScope,
}

impl<'a> Steering<'a> {
    pub fn edit(&self, prompt_len: usize) -> Edit<'a> {
        Edit::scoped(self.params, self.scope, prompt_len)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub question: String,
    pub expected: String,
    pub output: String,
    pub parsed: Option<String>,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub unparseable: usize,
    pub items: Vec<ItemRecord>,
}

fn expected_value(ex: &RawExample) -> Result<u128> {
    ex.answer
        .parse()
        .map_err(|_| domain(format!("reference answer {:?} is not a number", ex.answer)))
}

/// Greedy decode of every question; exact match on the parsed answer.
pub fn evaluate(
    weights: &BaseWeights,
    steering: Option<Steering<'_>>,
    examples: &[RawExample],
    max_new: usize,
) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(domain("evaluation set is empty"));
    }
    let opts = DecodeOptions::greedy(max_new);
    let mut items = Vec::with_capacity(examples.len());
    for ex in examples {
        let prompt = tokenize(&ex.question)?;
        let edit = steering.map(|s| s.edit(prompt.len()));
        let out = decode(weights, edit.as_ref(), &prompt, &opts)?;
        let parsed = parse_answer(&out);
        let expected = expected_value(ex)?;
        items.push(ItemRecord {
            question: ex.question.clone(),
            expected: ex.answer.clone(),
            output: detokenize(&out),
            parsed: parsed.map(|v| v.to_string()),
            correct: parsed == Some(expected),
        });
    }
    let correct = items.iter().filter(|i| i.correct).count();
    let unparseable = items.iter().filter(|i| i.parsed.is_none()).count();
    Ok(EvalReport {
        accuracy: correct as f64 / items.len() as f64,
        correct,
        total: items.len(),
        unparseable,
        items,
    })
}

/// Greedy exact match on tokenized examples; the reference is the parsed
/// response.
pub fn exact_match(
    weights: &BaseWeights,
    steering: Option<Steering<'_>>,
    examples: &[TrainExample],
    max_new: usize,
) -> Result<f64> {
    if examples.is_empty() {
        return Err(domain("evaluation set is empty"));
    }
    let opts = DecodeOptions::greedy(max_new);
    let mut hit = 0;
    for ex in examples {
        let p = ex.prompt_tokens.len();
        let edit = steering.map(|s| s.edit(p));
        let out = decode(weights, edit.as_ref(), &ex.prompt_tokens, &opts)?;
        let want = parse_answer(&ex.response_tokens);
        hit += (want.is_some() && parse_answer(&out) == want) as usize;
    }
    Ok(hit as f64 / examples.len() as f64)
}

/// Sampling seed for one (item, sample) pair, independent of the prefix length.
fn sample_seed(seed: u64, item: usize, sample: usize) -> u64 {
    let mut z = seed
        .wrapping_add((item as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add((sample as u64).wrapping_mul(0xD1B5_4A32_D192_ED03));
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingConfig {
    pub samples_per_item: usize,
    pub temperature: f64,
    pub seed: u64,
    pub max_new: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            samples_per_item: 10,
            temperature: 0.6,
            seed: 0,
            max_new: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefixRow {
    pub prefix_len: usize,
    pub accuracy: f64,
    pub correct: usize,
    pub samples: usize,
}

/// Samples `samples_per_item` base-model continuations of `prompt ++ prefix`
/// for item `idx` and counts correct answers.
fn continue_and_score(
    base: &BaseWeights,
    prompt: &[usize],
    prefix: &[usize],
    expected: u128,
    idx: usize,
    cfg: &SamplingConfig,
) -> Result<usize> {
    let mut correct = 0;
    if prefix.last() == Some(&EOS) || prefix.len() >= cfg.max_new {
        // nothing left to sample
        let hit = (parse_answer(prefix) == Some(expected)) as usize;
        return Ok(hit * cfg.samples_per_item);
    }
    let mut ctx = prompt.to_vec();
    ctx.extend_from_slice(prefix);
    for s in 0..cfg.samples_per_item {
        let opts = DecodeOptions::sample(
            cfg.max_new - prefix.len(),
            cfg.temperature,
            sample_seed(cfg.seed, idx, s),
        );
        let mut out = prefix.to_vec();
        out.extend(decode(base, None, &ctx, &opts)?);
        correct += (parse_answer(&out) == Some(expected)) as usize;
    }
    Ok(correct)
}

/// Accuracy of plain temperature sampling from `base`.
pub fn sampled_accuracy(base: &BaseWeights, examples: &[RawExample], cfg: &SamplingConfig) -> Result<f64> {
    let rows = prefix_guided_eval(base, None, base, examples, &[0], cfg)?;
    Ok(rows[0].accuracy)
}

/// For every prefix length `m`: the prefix model greedily writes the first
/// `m` response tokens, then the base model samples the rest.
pub fn prefix_guided_eval(
    prefix_model: &BaseWeights,
    steering: Option<Steering<'_>>,
    base: &BaseWeights,
    examples: &[RawExample],
    prefix_lengths: &[usize],
    cfg: &SamplingConfig,
) -> Result<Vec<PrefixRow>> {
    if prefix_model.config.vocab_size != base.config.vocab_size {
        return Err(Error::Config(format!(
            "prefix model vocabulary {} differs from base vocabulary {}",
            prefix_model.config.vocab_size, base.config.vocab_size
        )));
    }
    if cfg.samples_per_item == 0 {
        return Err(domain("samples_per_item must be at least 1"));
    }
    if examples.is_empty() {
        return Err(domain("evaluation set is empty"));
    }
    let max_m = prefix_lengths.iter().copied().max().unwrap_or(0);
    let mut correct = vec![0usize; prefix_lengths.len()];
    for (idx, ex) in examples.iter().enumerate() {
        let prompt = tokenize(&ex.question)?;
        let expected = expected_value(ex)?;
        let edit = steering.map(|s| s.edit(prompt.len()));
        // the longest greedy prefix covers every shorter one
        let full = decode(prefix_model, edit.as_ref(), &prompt, &DecodeOptions::greedy(max_m))?;
        for (slot, &m) in prefix_lengths.iter().enumerate() {
            let prefix = &full[..m.min(full.len())];
            correct[slot] += continue_and_score(base, &prompt, prefix, expected, idx, cfg)?;
        }
    }
    let samples = examples.len() * cfg.samples_per_item;
    Ok(prefix_lengths
        .iter()
        .zip(correct)
        .map(|(&m, c)| PrefixRow {
            prefix_len: m,
            accuracy: c as f64 / samples as f64,
            correct: c,
            samples,
        })
        .collect())
}
