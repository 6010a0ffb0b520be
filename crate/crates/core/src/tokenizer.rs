//! Fixed character alphabet shared by every model in the lab.

use crate::error::{Error, Result};

/// Index `i` encodes `ALPHABET[i]`. `_` is padding and `$` end-of-sequence.
pub const ALPHABET: &[char] = &[
    '_', '$', '0', '1', '2', '3', '4', '5', '6', '7', '8', '9', ' ', '?', '+', 'W', 'a', 'd', 'e',
    'f', 'h', 'i', 'm', 'n', 'o', 's', 't', 'u',
];

pub const ALPHABET_SIZE: usize = ALPHABET.len();
pub const PAD: usize = 0;
pub const EOS: usize = 1;

pub fn encode_char(c: char) -> Result<usize> {
    ALPHABET
        .iter()
        .position(|&a| a == c)
        .ok_or(Error::Encoding(c))
}

pub fn tokenize(text: &str) -> Result<Vec<usize>> {
    text.chars().map(encode_char).collect()
}

/// Tokens outside the alphabet (possible with a padded vocabulary) render as `�`.
pub fn detokenize(tokens: &[usize]) -> String {
    tokens
        .iter()
        .map(|&t| ALPHABET.get(t).copied().unwrap_or('\u{fffd}'))
        .collect()
}

pub fn is_digit(token: usize) -> bool {
    (2..12).contains(&token)
}
