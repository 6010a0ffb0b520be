use super::forward::{rotate_qk, ForwardTrace};
use super::BaseWeights;
use crate::error::{Error, Result};
use crate::intervention::InterventionParams;
use crate::ops;

/// Which parameter groups receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Trainable {
    pub base: bool,
    pub intervention: bool,
}

impl Trainable {
    pub const NONE: Trainable = Trainable {
        base: false,
        intervention: false,
    };
    pub const BASE: Trainable = Trainable {
        base: true,
        intervention: false,
    };
    pub const INTERVENTION: Trainable = Trainable {
        base: false,
        intervention: true,
    };
}

/// Gradients for the trainable groups, laid out like the parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientSet {
    pub base: Option<Vec<f64>>,
    pub intervention: Option<Vec<f64>>,
}

impl GradientSet {
    pub fn zeros(weights: &BaseWeights, edit: Option<&InterventionParams>, trainable: Trainable) -> Self {
        Self {
            base: trainable.base.then(|| vec![0.0; weights.num_params()]),
            intervention: match (trainable.intervention, edit) {
                (true, Some(p)) => Some(vec![0.0; p.data.len()]),
                _ => None,
            },
        }
    }

    pub fn is_empty(&self) -> bool {
        self.base.is_none() && self.intervention.is_none()
    }

    /// Flattened view used by the contamination diagnostics.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        if let Some(b) = &self.base {
            out.extend_from_slice(b);
        }
        if let Some(i) = &self.intervention {
            out.extend_from_slice(i);
        }
        out
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.base.iter_mut().chain(self.intervention.iter_mut()) {
            for v in g.iter_mut() {
                *v *= factor;
            }
        }
    }

    pub fn add_assign(&mut self, other: &GradientSet) {
        fn add(a: &mut Option<Vec<f64>>, b: &Option<Vec<f64>>) {
            if let (Some(a), Some(b)) = (a.as_mut(), b.as_ref()) {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
            }
        }
        add(&mut self.base, &other.base);
        add(&mut self.intervention, &other.intervention);
    }

    /// Errors naming the first parameter tensor holding a non-finite gradient.
    pub fn check_finite(&self, weights: &BaseWeights) -> Result<()> {
        if let Some(g) = &self.base {
            for (name, r, _) in &weights.layout.entries {
                if g[r.clone()].iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numeric {
                        what: format!("gradient of {name}"),
                        layer: None,
                    });
                }
            }
        }
        if let Some(g) = &self.intervention {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric {
                    what: "gradient of intervention parameters".into(),
                    layer: None,
                });
            }
        }
        Ok(())
    }
}

fn layer_norm_backward(
    dout: &[f64],
    xhat: &[f64],
    rstd: &[f64],
    gain: &[f64],
    dx: &mut [f64],
    mut dgain: Option<&mut [f64]>,
    mut dbias: Option<&mut [f64]>,
) {
    let d = gain.len();
    let mut dxhat = vec![0.0; d];
    for (t, (go, xh)) in dout.chunks_exact(d).zip(xhat.chunks_exact(d)).enumerate() {
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for i in 0..d {
            dxhat[i] = go[i] * gain[i];
            mean_dxhat += dxhat[i];
            mean_dxhat_xhat += dxhat[i] * xh[i];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        let r = rstd[t];
        let row = &mut dx[t * d..(t + 1) * d];
        for i in 0..d {
            row[i] += r * (dxhat[i] - mean_dxhat - xh[i] * mean_dxhat_xhat);
        }
        if let Some(g) = dgain.as_deref_mut() {
            for i in 0..d {
                g[i] += go[i] * xh[i];
            }
        }
        if let Some(b) = dbias.as_deref_mut() {
            for i in 0..d {
                b[i] += go[i];
            }
        }
    }
}

/// Reverse-mode pass from `dlogits` (`rows × vocab`), accumulating into
/// `grads`. Intervention gradients use the edit recorded in `trace`.
pub fn backward(weights: &BaseWeights, trace: &ForwardTrace, dlogits: &[f64], grads: &mut GradientSet) -> Result<()> {
    let cfg = &weights.config;
    let (d, v, heads, hd, f) = (
        cfg.embed_dim,
        cfg.vocab_size,
        cfg.num_heads,
        cfg.head_dim(),
        cfg.ffn_dim(),
    );
    let packing = &trace.packing;
    let t_len = packing.len();
    let n_keys = packing.total_keys();
    crate::error::check_len(t_len * v, dlogits.len())?;
    let lay = &weights.layout;
    let w = &weights.data;
    let acts = &trace.activations;
    let scale = 1.0 / (hd as f64).sqrt();

    let GradientSet {
        base: base_grad,
        intervention: int_grad,
    } = grads;
    let mut base_grad = base_grad.as_deref_mut();
    let mut int_grad = int_grad.as_deref_mut();

    let mut dh = vec![0.0; t_len * d];
    let h_last = acts.layer(cfg.num_layers);
    ops::matmul_a_bt(dlogits, &w[lay.output.clone()], &mut dh, t_len, v, d, false);
    if let Some(g) = base_grad.as_deref_mut() {
        ops::matmul_at_b(h_last, dlogits, &mut g[lay.output.clone()], d, t_len, v, true);
    }

    let mut dqkv = vec![0.0; t_len * 3 * d];
    let mut dctx = vec![0.0; t_len * d];
    let mut dact = vec![0.0; t_len * f];
    let mut dln = vec![0.0; t_len * d];
    let mut datt = vec![0.0; t_len];
    let mut keys: Vec<usize> = Vec::with_capacity(t_len);

    for (l, bl) in lay.blocks.iter().enumerate().rev() {
        let c = &trace.blocks[l];

        // edit: h = W ⊙ u + b on flagged rows
        let mut du = dh;
        if let Some(params) = &trace.edit_params {
            if let Some(slot) = params.slot(l) {
                let ws = params.scale(slot);
                let o = 2 * d * slot;
                for t in 0..t_len {
                    if !trace.edited[t] {
                        continue;
                    }
                    let row = &mut du[t * d..(t + 1) * d];
                    if let Some(g) = int_grad.as_deref_mut() {
                        let u = &c.unedited[t * d..(t + 1) * d];
                        for i in 0..d {
                            g[o + i] += row[i] * u[i];
                            g[o + d + i] += row[i];
                        }
                    }
                    for i in 0..d {
                        row[i] *= ws[i];
                    }
                }
            }
        }

        // feed-forward branch
        let mut dy = du.clone();
        if let Some(g) = base_grad.as_deref_mut() {
            ops::matmul_at_b(&c.act, &du, &mut g[bl.proj_weight.clone()], f, t_len, d, true);
            ops::accumulate_col_sums(&du, &mut g[bl.proj_bias.clone()]);
        }
        ops::matmul_a_bt(&du, &w[bl.proj_weight.clone()], &mut dact, t_len, d, f, false);
        for (g, p) in dact.iter_mut().zip(&c.pre) {
            *g *= ops::gelu_grad(*p);
        }
        if let Some(g) = base_grad.as_deref_mut() {
            ops::matmul_at_b(&c.ln2_out, &dact, &mut g[bl.fc_weight.clone()], d, t_len, f, true);
            ops::accumulate_col_sums(&dact, &mut g[bl.fc_bias.clone()]);
        }
        ops::matmul_a_bt(&dact, &w[bl.fc_weight.clone()], &mut dln, t_len, f, d, false);
        {
            let (dg, db) = match base_grad.as_deref_mut() {
                Some(g) => {
                    let (lo, hi) = g.split_at_mut(bl.ln2_bias.start);
                    (
                        Some(&mut lo[bl.ln2_gain.clone()]),
                        Some(&mut hi[..bl.ln2_bias.len()]),
                    )
                }
                None => (None, None),
            };
            layer_norm_backward(&dln, &c.ln2_xhat, &c.ln2_rstd, &w[bl.ln2_gain.clone()], &mut dy, dg, db);
        }

        // attention branch
        let mut dx = dy.clone();
        if let Some(g) = base_grad.as_deref_mut() {
            ops::matmul_at_b(&c.ctx, &dy, &mut g[bl.attn_out_weight.clone()], d, t_len, d, true);
            ops::accumulate_col_sums(&dy, &mut g[bl.attn_out_bias.clone()]);
        }
        ops::matmul_a_bt(&dy, &w[bl.attn_out_weight.clone()], &mut dctx, t_len, d, d, false);
        dqkv.fill(0.0);
        for hh in 0..heads {
            let att = &c.att[hh * n_keys..(hh + 1) * n_keys];
            for t in 0..t_len {
                let (r1, r2) = packing.key_ranges(t);
                keys.clear();
                keys.extend(r1.chain(r2));
                let off = packing.key_offset(t);
                let p = &att[off..off + keys.len()];
                let go = &dctx[t * d + hh * hd..t * d + (hh + 1) * hd];
                let da = &mut datt[..keys.len()];
                for (j, &s) in keys.iter().enumerate() {
                    let vo = s * 3 * d + 2 * d + hh * hd;
                    da[j] = ops::dot(go, &c.qkv[vo..vo + hd]);
                    let dv = &mut dqkv[vo..vo + hd];
                    for i in 0..hd {
                        dv[i] += p[j] * go[i];
                    }
                }
                let inner = ops::dot(p, da);
                let qo = t * 3 * d + hh * hd;
                for (j, &s) in keys.iter().enumerate() {
                    let ds = p[j] * (da[j] - inner) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let ko = s * 3 * d + d + hh * hd;
                    for i in 0..hd {
                        dqkv[qo + i] += ds * c.qkv[ko + i];
                        dqkv[ko + i] += ds * c.qkv[qo + i];
                    }
                }
            }
        }
        rotate_qk(&mut dqkv, &packing.positions, d, hd, true);
        if let Some(g) = base_grad.as_deref_mut() {
            ops::matmul_at_b(&c.ln1_out, &dqkv, &mut g[bl.qkv_weight.clone()], d, t_len, 3 * d, true);
            ops::accumulate_col_sums(&dqkv, &mut g[bl.qkv_bias.clone()]);
        }
        ops::matmul_a_bt(&dqkv, &w[bl.qkv_weight.clone()], &mut dln, t_len, 3 * d, d, false);
        {
            let (dg, db) = match base_grad.as_deref_mut() {
                Some(g) => {
                    let (lo, hi) = g.split_at_mut(bl.ln1_bias.start);
                    (
                        Some(&mut lo[bl.ln1_gain.clone()]),
                        Some(&mut hi[..bl.ln1_bias.len()]),
                    )
                }
                None => (None, None),
            };
            layer_norm_backward(&dln, &c.ln1_xhat, &c.ln1_rstd, &w[bl.ln1_gain.clone()], &mut dx, dg, db);
        }
        dh = dx;
    }

    if let Some(g) = base_grad.as_deref_mut() {
        let (lo, hi) = g.split_at_mut(lay.pos_embed.start);
        let tok = &mut lo[lay.token_embed.clone()];
        let pos = &mut hi[..lay.pos_embed.len()];
        for (t, (&id, &p)) in packing.tokens.iter().zip(&packing.positions).enumerate() {
            let row = &dh[t * d..(t + 1) * d];
            for i in 0..d {
                tok[id * d + i] += row[i];
                pos[p * d + i] += row[i];
            }
        }
    }
    Ok(())
}
