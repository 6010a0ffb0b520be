//! Learnable per-layer scale/bias edits of hidden states and the position
//! masks that restrict where they apply.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, domain, Error, Result};
use crate::ops;

/// `W ⊙ h + b`.
pub fn apply_reft(h: &[f64], scale: &[f64], bias: &[f64]) -> Result<Vec<f64>> {
    check_len(h.len(), scale.len())?;
    check_len(h.len(), bias.len())?;
    Ok(h.iter()
        .zip(scale)
        .zip(bias)
        .map(|((h, w), b)| w * h + b)
        .collect())
}

/// Scale and bias vectors for a set of intervened layers.
///
/// Layer `j` here refers to the output of block `j` (0-based), i.e. the
/// hidden state `h^{j+1}`; the embedding output is never edited.
#[derive(Debug, Clone, PartialEq)]
pub struct InterventionParams {
    pub dim: usize,
    pub layers: Vec<usize>,
    /// `[scale_0, bias_0, scale_1, bias_1, ...]`, each of length `dim`.
    pub data: Vec<f64>,
}

impl InterventionParams {
    /// Identity edit (`W = 1`, `b = 0`) on the given layers.
    pub fn identity(dim: usize, layers: &[usize]) -> Self {
        let mut layers = layers.to_vec();
        layers.sort_unstable();
        layers.dedup();
        let mut data = vec![0.0; 2 * dim * layers.len()];
        for chunk in data.chunks_exact_mut(2 * dim) {
            chunk[..dim].fill(1.0);
        }
        Self { dim, layers, data }
    }

    /// Identity edit on every layer of an `num_layers`-deep model.
    pub fn all_layers(dim: usize, num_layers: usize) -> Self {
        let layers: Vec<usize> = (0..num_layers).collect();
        Self::identity(dim, &layers)
    }

    /// Position of `layer` in `self.layers`.
    pub fn slot(&self, layer: usize) -> Option<usize> {
        self.layers.binary_search(&layer).ok()
    }

    pub fn scale(&self, slot: usize) -> &[f64] {
        let o = 2 * self.dim * slot;
        &self.data[o..o + self.dim]
    }

    pub fn bias(&self, slot: usize) -> &[f64] {
        let o = 2 * self.dim * slot + self.dim;
        &self.data[o..o + self.dim]
    }

    pub fn scale_mut(&mut self, slot: usize) -> &mut [f64] {
        let o = 2 * self.dim * slot;
        &mut self.data[o..o + self.dim]
    }

    pub fn bias_mut(&mut self, slot: usize) -> &mut [f64] {
        let o = 2 * self.dim * slot + self.dim;
        &mut self.data[o..o + self.dim]
    }

    /// Indices into `data` that hold scale entries.
    pub fn scale_indices(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.layers.len()).flat_map(move |s| {
            let o = 2 * self.dim * s;
            o..o + self.dim
        })
    }

    /// All biases concatenated in layer order.
    pub fn concat_bias(&self) -> Vec<f64> {
        (0..self.layers.len())
            .flat_map(|s| self.bias(s).iter().copied())
            .collect()
    }

    pub fn is_identity(&self) -> bool {
        (0..self.layers.len()).all(|s| {
            self.scale(s).iter().all(|&w| w == 1.0) && self.bias(s).iter().all(|&b| b == 0.0)
        })
    }
}

/// Where edits apply along the sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScopeKind {
    AllPositions,
    ResponseOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterventionScope {
    pub kind: ScopeKind,
    /// Maximum number of response positions edited; `None` is unlimited.
    pub n: Option<usize>,
}

impl InterventionScope {
    pub fn all_positions() -> Self {
        Self {
            kind: ScopeKind::AllPositions,
            n: None,
        }
    }

    pub fn response_only(n: Option<usize>) -> Self {
        Self {
            kind: ScopeKind::ResponseOnly,
            n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Prompt,
    Response,
}

/// `position` is 0-based within its region.
pub fn should_intervene(position: usize, region: Region, scope: InterventionScope) -> bool {
    match scope.kind {
        ScopeKind::AllPositions => true,
        ScopeKind::ResponseOnly => {
            region == Region::Response && scope.n.map_or(true, |n| position < n)
        }
    }
}

/// Selects absolute sequence positions that receive the edit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PositionMask {
    /// Positions `< prompt_len` are prompt, the rest response.
    Scoped {
        scope: InterventionScope,
        prompt_len: usize,
    },
    /// Every position at or after `start`.
    From(usize),
}

impl PositionMask {
    pub fn contains(&self, pos: usize) -> bool {
        match *self {
            PositionMask::Scoped { scope, prompt_len } => {
                if pos < prompt_len {
                    should_intervene(pos, Region::Prompt, scope)
                } else {
                    should_intervene(pos - prompt_len, Region::Response, scope)
                }
            }
            PositionMask::From(start) => pos >= start,
        }
    }
}

/// An edit handed to the forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Edit<'a> {
    pub params: &'a InterventionParams,
    pub mask: PositionMask,
}

impl<'a> Edit<'a> {
    pub fn scoped(params: &'a InterventionParams, scope: InterventionScope, prompt_len: usize) -> Self {
        Self {
            params,
            mask: PositionMask::Scoped { scope, prompt_len },
        }
    }
}

/// `b(t) = (1/L) Σ_j ‖b_j‖₂` over the intervened layers.
pub fn mean_bias_norm(params: &InterventionParams) -> Result<f64> {
    let layers = params.layers.len();
    if layers == 0 {
        return Err(domain("mean bias norm of an empty layer set"));
    }
    let total: f64 = (0..layers).map(|s| ops::norm(params.bias(s))).sum();
    Ok(total / layers as f64)
}

/// Cosine between the layer-concatenated bias vectors.
pub fn bias_cosine_similarity(a: &InterventionParams, b: &InterventionParams) -> Result<f64> {
    if a.dim != b.dim || a.layers != b.layers {
        return Err(domain("bias similarity needs matching width and layer sets"));
    }
    let (x, y) = (a.concat_bias(), b.concat_bias());
    let (nx, ny) = (ops::norm(&x), ops::norm(&y));
    if nx == 0.0 || ny == 0.0 {
        return Err(Error::Domain("bias similarity of a zero vector".into()));
    }
    Ok((ops::dot(&x, &y) / (nx * ny)).clamp(-1.0, 1.0))
}
