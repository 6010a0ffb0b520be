use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::eval::Steering;
use crate::model::{forward, BaseWeights};
use crate::tokenizer::is_digit;

/// Token whose hidden state a numerical probe reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionTag {
    /// Last digit of the first operand.
    FirstNumber,
    /// Last digit of the second operand.
    SecondNumber,
    /// Final prompt token.
    LastToken,
}

impl PositionTag {
    pub const ALL: [PositionTag; 3] = [Self::FirstNumber, Self::SecondNumber, Self::LastToken];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::FirstNumber => "first_number",
            Self::SecondNumber => "second_number",
            Self::LastToken => "last_token",
        }
    }

    /// Index into the triple returned by [`numeric_positions`].
    fn slot(self) -> usize {
        match self {
            Self::FirstNumber => 0,
            Self::SecondNumber => 1,
            Self::LastToken => 2,
        }
    }
}

impl fmt::Display for PositionTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PositionTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown position tag {s:?}")))
    }
}

/// Positions of the last digit of each operand and of the final prompt token.
/// The prompt must contain exactly two digit runs.
pub fn numeric_positions(prompt: &[usize]) -> Result<[usize; 3]> {
    let mut ends = Vec::new();
    for (i, &t) in prompt.iter().enumerate() {
        if is_digit(t) && prompt.get(i + 1).map_or(true, |&n| !is_digit(n)) {
            ends.push(i);
        }
    }
    if ends.len() != 2 {
        return Err(domain(format!("expected two numbers in the prompt, found {}", ends.len())));
    }
    Ok([ends[0], ends[1], prompt.len() - 1])
}

/// Hidden state after block `layer` at the tagged position of each prompt.
pub fn collect_hidden(
    weights: &BaseWeights,
    steering: Option<Steering<'_>>,
    prompts: &[Vec<usize>],
    layer: usize,
    tag: PositionTag,
) -> Result<Vec<Vec<f64>>> {
    if layer >= weights.config.num_layers {
        return Err(domain(format!("layer {layer} out of range")));
    }
    prompts
        .iter()
        .map(|p| {
            let pos = numeric_positions(p)?[tag.slot()];
            let edit = steering.map(|s| s.edit(p.len()));
            let trace = forward(weights, p, edit.as_ref())?;
            Ok(trace.activations.row(layer + 1, pos).to_vec())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::tokenize;

    #[test]
    fn template_positions() {
        let q = "What is the sum of 12 and 345?";
        let t = tokenize(q).unwrap();
        let [a, b, last] = numeric_positions(&t).unwrap();
        assert_eq!(&q[a..=a], "2");
        assert_eq!(&q[b..=b], "5");
        assert_eq!(&q[last..], "?");
        assert!(numeric_positions(&tokenize("What is the sum of 1?").unwrap()).is_err());
        assert_eq!("second_number".parse::<PositionTag>().unwrap(), PositionTag::SecondNumber);
    }
}
