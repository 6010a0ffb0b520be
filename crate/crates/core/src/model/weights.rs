use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::ModelConfig;
use crate::error::Result;

/// Offsets of one transformer block inside the flat parameter buffer.
#[derive(Debug, Clone)]
pub struct BlockLayout {
    pub ln1_gain: Range<usize>,
    pub ln1_bias: Range<usize>,
    pub qkv_weight: Range<usize>,
    pub qkv_bias: Range<usize>,
    pub attn_out_weight: Range<usize>,
    pub attn_out_bias: Range<usize>,
    pub ln2_gain: Range<usize>,
    pub ln2_bias: Range<usize>,
    pub fc_weight: Range<usize>,
    pub fc_bias: Range<usize>,
    pub proj_weight: Range<usize>,
    pub proj_bias: Range<usize>,
}

/// Named, shaped views into the flat parameter buffer.
#[derive(Debug, Clone)]
pub struct Layout {
    pub token_embed: Range<usize>,
    pub pos_embed: Range<usize>,
    pub blocks: Vec<BlockLayout>,
    pub output: Range<usize>,
    pub total: usize,
    /// (name, range, shape) in storage order.
    pub entries: Vec<(String, Range<usize>, Vec<usize>)>,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.embed_dim;
        let f = cfg.ffn_dim();
        let mut entries = Vec::new();
        let mut cursor = 0;
        let mut take = |name: String, shape: Vec<usize>| {
            let len: usize = shape.iter().product();
            let r = cursor..cursor + len;
            cursor += len;
            entries.push((name, r.clone(), shape));
            r
        };
        let token_embed = take("token_embed".into(), vec![cfg.vocab_size, d]);
        let pos_embed = take("pos_embed".into(), vec![cfg.context_len, d]);
        let mut blocks = Vec::with_capacity(cfg.num_layers);
        for l in 0..cfg.num_layers {
            let p = |s: &str| format!("block{l}.{s}");
            blocks.push(BlockLayout {
                ln1_gain: take(p("ln1_gain"), vec![d]),
                ln1_bias: take(p("ln1_bias"), vec![d]),
                qkv_weight: take(p("qkv_weight"), vec![d, 3 * d]),
                qkv_bias: take(p("qkv_bias"), vec![3 * d]),
                attn_out_weight: take(p("attn_out_weight"), vec![d, d]),
                attn_out_bias: take(p("attn_out_bias"), vec![d]),
                ln2_gain: take(p("ln2_gain"), vec![d]),
                ln2_bias: take(p("ln2_bias"), vec![d]),
                fc_weight: take(p("fc_weight"), vec![d, f]),
                fc_bias: take(p("fc_bias"), vec![f]),
                proj_weight: take(p("proj_weight"), vec![f, d]),
                proj_bias: take(p("proj_bias"), vec![d]),
            });
        }
        let output = take("output".into(), vec![d, cfg.vocab_size]);
        Self {
            token_embed,
            pos_embed,
            blocks,
            output,
            total: cursor,
            entries,
        }
    }
}

/// The frozen base model parameters, stored as one flat buffer.
#[derive(Debug, Clone)]
pub struct BaseWeights {
    pub config: ModelConfig,
    pub layout: Layout,
    pub data: Vec<f64>,
}

impl BaseWeights {
    /// GPT-2 style initialisation: N(0, 0.02) matrices, residual projections
    /// scaled by 1/sqrt(2L), unit layer-norm gains, zero biases.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut data = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let std = 0.02;
        let resid_std = std / (2.0 * config.num_layers as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let resid = Normal::new(0.0, resid_std).expect("valid std");
        let mut fill = |r: &Range<usize>, dist: &Normal<f64>, data: &mut [f64]| {
            for v in &mut data[r.clone()] {
                *v = dist.sample(&mut rng);
            }
        };
        fill(&layout.token_embed, &normal, &mut data);
        fill(&layout.pos_embed, &normal, &mut data);
        for b in &layout.blocks {
            data[b.ln1_gain.clone()].fill(1.0);
            data[b.ln2_gain.clone()].fill(1.0);
            fill(&b.qkv_weight, &normal, &mut data);
            fill(&b.attn_out_weight, &resid, &mut data);
            fill(&b.fc_weight, &normal, &mut data);
            fill(&b.proj_weight, &resid, &mut data);
        }
        fill(&layout.output, &normal, &mut data);
        Ok(Self {
            config,
            layout,
            data,
        })
    }

    pub fn from_parts(config: ModelConfig, data: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        crate::error::check_len(layout.total, data.len())?;
        Ok(Self {
            config,
            layout,
            data,
        })
    }

    pub fn slice(&self, r: &Range<usize>) -> &[f64] {
        &self.data[r.clone()]
    }

    pub fn num_params(&self) -> usize {
        self.layout.total
    }

    /// SHA-256 over the little-endian parameter bytes.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for v in &self.data {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}
