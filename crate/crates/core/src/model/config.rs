use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::ALPHABET_SIZE;

/// Shape of the decoder-only base model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub context_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 32,
            embed_dim: 64,
            num_layers: 4,
            num_heads: 4,
            context_len: 128,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("context_len", self.context_len),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::Config(format!(
                "head dimension {} must be even for rotary position encoding",
                self.head_dim()
            )));
        }
        Ok(())
    }

    /// The character pipeline needs every alphabet entry to be a valid token.
    /// Pure model checks (e.g. gradient tests) may use smaller vocabularies.
    pub fn check_alphabet(&self) -> Result<()> {
        if self.vocab_size < ALPHABET_SIZE {
            return Err(Error::Config(format!(
                "vocab_size {} smaller than alphabet size {ALPHABET_SIZE}",
                self.vocab_size
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.embed_dim
    }
}
