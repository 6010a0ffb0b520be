use super::{BaseWeights, Packing};
use crate::error::{Error, Result};
use crate::intervention::{Edit, InterventionParams};
use crate::ops;

pub(crate) const LN_EPS: f64 = 1e-5;

/// Hidden states `h^0..h^L`, each `seq_len × dim`, row-major.
#[derive(Debug, Clone)]
pub struct LayerActivations {
    pub seq_len: usize,
    pub dim: usize,
    pub hidden: Vec<Vec<f64>>,
}

impl LayerActivations {
    pub fn num_layers(&self) -> usize {
        self.hidden.len() - 1
    }

    pub fn layer(&self, j: usize) -> &[f64] {
        &self.hidden[j]
    }

    pub fn row(&self, j: usize, t: usize) -> &[f64] {
        &self.hidden[j][t * self.dim..(t + 1) * self.dim]
    }
}

#[derive(Debug, Clone, Default)]
pub(crate) struct BlockCache {
    pub ln1_xhat: Vec<f64>,
    pub ln1_rstd: Vec<f64>,
    pub ln1_out: Vec<f64>,
    pub qkv: Vec<f64>,
    pub att: Vec<f64>,
    pub ctx: Vec<f64>,
    pub ln2_xhat: Vec<f64>,
    pub ln2_rstd: Vec<f64>,
    pub ln2_out: Vec<f64>,
    pub pre: Vec<f64>,
    pub act: Vec<f64>,
    /// Block output before the edit, `h^{j-1} + A^j + F^j`.
    pub unedited: Vec<f64>,
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub packing: Packing,
    pub activations: LayerActivations,
    /// `seq_len × vocab_size`; row `t` scores the token at `t + 1`.
    pub logits: Vec<f64>,
    pub(crate) blocks: Vec<BlockCache>,
    /// Per-row edit flags; empty when no edit was applied.
    pub(crate) edited: Vec<bool>,
    pub(crate) edit_params: Option<InterventionParams>,
}

impl ForwardTrace {
    pub fn logits_row(&self, t: usize, vocab: usize) -> &[f64] {
        &self.logits[t * vocab..(t + 1) * vocab]
    }
}

pub(crate) fn layer_norm(
    x: &[f64],
    gain: &[f64],
    bias: &[f64],
    out: &mut [f64],
    xhat: &mut [f64],
    rstd: &mut [f64],
) {
    let d = gain.len();
    for (t, row) in x.chunks_exact(d).enumerate() {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[t] = r;
        for i in 0..d {
            let n = (row[i] - mean) * r;
            xhat[t * d + i] = n;
            out[t * d + i] = n * gain[i] + bias[i];
        }
    }
}

const ROPE_BASE: f64 = 10_000.0;

/// Rotary position encoding of the query and key parts of packed `qkv`
/// rows: pair `(2i, 2i+1)` of every head at logical position `p` turns by
/// `p · base^(-2i/hd)`. `inverse` applies the transpose, which maps
/// gradients with respect to rotated vectors back to unrotated ones.
pub(crate) fn rotate_qk(qkv: &mut [f64], positions: &[usize], d: usize, hd: usize, inverse: bool) {
    let half = hd / 2;
    let freqs: Vec<f64> = (0..half).map(|i| ROPE_BASE.powf(-2.0 * i as f64 / hd as f64)).collect();
    let sign = if inverse { -1.0 } else { 1.0 };
    for (row, &p) in qkv.chunks_exact_mut(3 * d).zip(positions) {
        if p == 0 {
            continue;
        }
        let (sin, cos): (Vec<f64>, Vec<f64>) = freqs.iter().map(|f| (p as f64 * f).sin_cos()).unzip();
        for head in row[..2 * d].chunks_exact_mut(hd) {
            for i in 0..half {
                let (a, b) = (head[2 * i], head[2 * i + 1]);
                let s = sign * sin[i];
                head[2 * i] = a * cos[i] - b * s;
                head[2 * i + 1] = a * s + b * cos[i];
            }
        }
    }
}

fn check_finite(values: &[f64], what: &str, layer: Option<usize>) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric {
            what: what.to_string(),
            layer,
        })
    }
}

/// Runs the base model, optionally editing each intervened block output at
/// the positions selected by the edit mask.
pub fn forward(weights: &BaseWeights, tokens: &[usize], edit: Option<&Edit<'_>>) -> Result<ForwardTrace> {
    let packing = Packing::single(tokens);
    match edit {
        Some(e) => {
            let rows: Vec<bool> = (0..tokens.len()).map(|p| e.mask.contains(p)).collect();
            forward_packed(weights, &packing, Some((e.params, &rows)))
        }
        None => forward_packed(weights, &packing, None),
    }
}

/// Forward pass over a packed batch; `edit` carries per-row flags.
pub fn forward_packed(
    weights: &BaseWeights,
    packing: &Packing,
    edit: Option<(&InterventionParams, &[bool])>,
) -> Result<ForwardTrace> {
    let cfg = &weights.config;
    let (d, v, heads, hd, f) = (
        cfg.embed_dim,
        cfg.vocab_size,
        cfg.num_heads,
        cfg.head_dim(),
        cfg.ffn_dim(),
    );
    let t_len = packing.len();
    let tokens = &packing.tokens;
    let longest = packing.positions.iter().max().map_or(0, |p| p + 1);
    if longest > cfg.context_len {
        return Err(Error::Length {
            len: longest,
            max: cfg.context_len,
        });
    }
    if let Some(&bad) = tokens.iter().find(|&&tok| tok >= v) {
        return Err(Error::Token {
            token: bad,
            vocab: v,
        });
    }
    if let Some((p, rows)) = edit {
        crate::error::check_len(d, p.dim)?;
        crate::error::check_len(t_len, rows.len())?;
    }
    let lay = &weights.layout;
    let w = &weights.data;
    let n_keys = packing.total_keys();

    let mut h0 = vec![0.0; t_len * d];
    let tok = &w[lay.token_embed.clone()];
    let pos = &w[lay.pos_embed.clone()];
    for (t, (&id, &p)) in tokens.iter().zip(&packing.positions).enumerate() {
        let row = &mut h0[t * d..(t + 1) * d];
        for i in 0..d {
            row[i] = tok[id * d + i] + pos[p * d + i];
        }
    }
    check_finite(&h0, "embedding", Some(0))?;

    let edited: Vec<bool> = edit.map(|(_, r)| r.to_vec()).unwrap_or_default();

    let mut hidden = Vec::with_capacity(cfg.num_layers + 1);
    hidden.push(h0);
    let mut blocks = Vec::with_capacity(cfg.num_layers);
    let scale = 1.0 / (hd as f64).sqrt();

    for (l, bl) in lay.blocks.iter().enumerate() {
        let x = hidden.last().expect("embedding present");
        let mut c = BlockCache {
            ln1_xhat: vec![0.0; t_len * d],
            ln1_rstd: vec![0.0; t_len],
            ln1_out: vec![0.0; t_len * d],
            qkv: vec![0.0; t_len * 3 * d],
            att: vec![0.0; heads * n_keys],
            ctx: vec![0.0; t_len * d],
            ln2_xhat: vec![0.0; t_len * d],
            ln2_rstd: vec![0.0; t_len],
            ln2_out: vec![0.0; t_len * d],
            pre: vec![0.0; t_len * f],
            act: vec![0.0; t_len * f],
            unedited: vec![0.0; t_len * d],
        };
        layer_norm(
            x,
            &w[bl.ln1_gain.clone()],
            &w[bl.ln1_bias.clone()],
            &mut c.ln1_out,
            &mut c.ln1_xhat,
            &mut c.ln1_rstd,
        );
        ops::matmul(&c.ln1_out, &w[bl.qkv_weight.clone()], &mut c.qkv, t_len, d, 3 * d, false);
        ops::add_row_bias(&mut c.qkv, &w[bl.qkv_bias.clone()]);
        rotate_qk(&mut c.qkv, &packing.positions, d, hd, false);

        for hh in 0..heads {
            let att = &mut c.att[hh * n_keys..(hh + 1) * n_keys];
            for t in 0..t_len {
                let q = &c.qkv[t * 3 * d + hh * hd..t * 3 * d + (hh + 1) * hd];
                let (r1, r2) = packing.key_ranges(t);
                let off = packing.key_offset(t);
                let row = &mut att[off..off + r1.len() + r2.len()];
                for (a, s) in row.iter_mut().zip(r1.clone().chain(r2.clone())) {
                    let k = &c.qkv[s * 3 * d + d + hh * hd..s * 3 * d + d + (hh + 1) * hd];
                    *a = ops::dot(q, k) * scale;
                }
                ops::softmax_in_place(row);
                let out = &mut c.ctx[t * d + hh * hd..t * d + (hh + 1) * hd];
                for (&p, s) in row.iter().zip(r1.chain(r2)) {
                    let vv = &c.qkv[s * 3 * d + 2 * d + hh * hd..s * 3 * d + 2 * d + (hh + 1) * hd];
                    for (o, x) in out.iter_mut().zip(vv) {
                        *o += p * x;
                    }
                }
            }
        }

        // y = x + A, kept in `unedited` until the FFN is added
        let y = &mut c.unedited;
        y.copy_from_slice(x);
        ops::matmul(&c.ctx, &w[bl.attn_out_weight.clone()], y, t_len, d, d, true);
        ops::add_row_bias(y, &w[bl.attn_out_bias.clone()]);

        layer_norm(
            y,
            &w[bl.ln2_gain.clone()],
            &w[bl.ln2_bias.clone()],
            &mut c.ln2_out,
            &mut c.ln2_xhat,
            &mut c.ln2_rstd,
        );
        ops::matmul(&c.ln2_out, &w[bl.fc_weight.clone()], &mut c.pre, t_len, d, f, false);
        ops::add_row_bias(&mut c.pre, &w[bl.fc_bias.clone()]);
        for (a, p) in c.act.iter_mut().zip(&c.pre) {
            *a = ops::gelu(*p);
        }
        ops::matmul(&c.act, &w[bl.proj_weight.clone()], &mut c.unedited, t_len, f, d, true);
        ops::add_row_bias(&mut c.unedited, &w[bl.proj_bias.clone()]);

        let mut out = c.unedited.clone();
        if let Some((params, _)) = edit {
            if let Some(slot) = params.slot(l) {
                let (ws, bs) = (params.scale(slot), params.bias(slot));
                for (t, row) in out.chunks_exact_mut(d).enumerate() {
                    if edited[t] {
                        for i in 0..d {
                            row[i] = ws[i] * row[i] + bs[i];
                        }
                    }
                }
            }
        }
        check_finite(&out, "hidden state", Some(l + 1))?;
        hidden.push(out);
        blocks.push(c);
    }

    let mut logits = vec![0.0; t_len * v];
    ops::matmul(
        hidden.last().expect("final layer"),
        &w[lay.output.clone()],
        &mut logits,
        t_len,
        d,
        v,
        false,
    );
    check_finite(&logits, "logits", None)?;

    Ok(ForwardTrace {
        packing: packing.clone(),
        activations: LayerActivations {
            seq_len: t_len,
            dim: d,
            hidden,
        },
        logits,
        blocks,
        edited,
        edit_params: edit.map(|(p, _)| p.clone()),
    })
}
