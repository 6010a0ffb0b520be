//! Self-describing binary container shared by model, intervention and probe
//! files.
//!
//! Layout:
//!
//! ```text
//! BREP-CONTAINER 1\n
//! meta <key> <value>\n          (any number, order preserved)
//! tensor <name> <d0>x<d1>...\n  (any number, order preserved)
//! end\n
//! <f64 little-endian data of every tensor, concatenated in header order>
//! ```
//!
//! Keys and tensor names contain no whitespace; values run to end of line.

use std::path::Path;

use crate::error::{Error, Result};
use crate::intervention::{InterventionParams, InterventionScope, ScopeKind};
use crate::model::{BaseWeights, ModelConfig};

const MAGIC: &str = "BREP-CONTAINER 1";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl Container {
    pub fn push_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.push((key.to_string(), value.to_string()));
    }

    pub fn push_tensor(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push((name.to_string(), shape, data));
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Format(format!("missing meta key {key}")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.meta(key)?;
        v.parse()
            .map_err(|_| Error::Format(format!("bad value {v:?} for {key}")))
    }

    pub fn tensor(&self, name: &str) -> Result<&[f64]> {
        self.tensors
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, _, d)| d.as_slice())
            .ok_or_else(|| Error::Format(format!("missing tensor {name}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = String::new();
        header.push_str(MAGIC);
        header.push('\n');
        for (k, v) in &self.meta {
            header.push_str(&format!("meta {k} {v}\n"));
        }
        for (name, shape, _) in &self.tensors {
            let dims: Vec<String> = shape.iter().map(usize::to_string).collect();
            header.push_str(&format!("tensor {name} {}\n", dims.join("x")));
        }
        header.push_str("end\n");
        let mut out = header.into_bytes();
        for (_, _, data) in &self.tensors {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = 0;
        let mut next_line = || -> Result<String> {
            let rest = &bytes[cursor..];
            let nl = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| Error::Format("truncated header".into()))?;
            cursor += nl + 1;
            String::from_utf8(rest[..nl].to_vec()).map_err(|_| Error::Format("header is not UTF-8".into()))
        };
        if next_line()? != MAGIC {
            return Err(Error::Format("bad magic line".into()));
        }
        let mut c = Container::default();
        let mut shapes = Vec::new();
        loop {
            let line = next_line()?;
            if line == "end" {
                break;
            }
            let (tag, rest) = line
                .split_once(' ')
                .ok_or_else(|| Error::Format(format!("bad header line {line:?}")))?;
            let (key, value) = rest
                .split_once(' ')
                .ok_or_else(|| Error::Format(format!("bad header line {line:?}")))?;
            match tag {
                "meta" => c.meta.push((key.to_string(), value.to_string())),
                "tensor" => {
                    let shape = value
                        .split('x')
                        .map(|d| d.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| Error::Format(format!("bad shape {value:?}")))?;
                    shapes.push((key.to_string(), shape));
                }
                _ => return Err(Error::Format(format!("unknown header tag {tag:?}"))),
            }
        }
        let mut data = &bytes[cursor..];
        for (name, shape) in shapes {
            let len: usize = shape.iter().product();
            if data.len() < len * 8 {
                return Err(Error::Format(format!("tensor {name} truncated")));
            }
            let values = data[..len * 8]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                .collect();
            data = &data[len * 8..];
            c.tensors.push((name, shape, values));
        }
        if !data.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", data.len())));
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    fn expect_kind(&self, kind: &str) -> Result<()> {
        let k = self.meta("kind")?;
        if k == kind {
            Ok(())
        } else {
            Err(Error::Format(format!("expected a {kind} file, found {k}")))
        }
    }
}

pub fn model_to_container(w: &BaseWeights) -> Container {
    let cfg = &w.config;
    let mut c = Container::default();
    c.push_meta("kind", "model");
    c.push_meta("vocab_size", cfg.vocab_size);
    c.push_meta("embed_dim", cfg.embed_dim);
    c.push_meta("num_layers", cfg.num_layers);
    c.push_meta("num_heads", cfg.num_heads);
    c.push_meta("context_len", cfg.context_len);
    c.push_meta("seed", cfg.seed);
    for (name, r, shape) in &w.layout.entries {
        c.push_tensor(name, shape.clone(), w.data[r.clone()].to_vec());
    }
    c
}

pub fn model_from_container(c: &Container) -> Result<BaseWeights> {
    c.expect_kind("model")?;
    let cfg = ModelConfig {
        vocab_size: c.meta_parse("vocab_size")?,
        embed_dim: c.meta_parse("embed_dim")?,
        num_layers: c.meta_parse("num_layers")?,
        num_heads: c.meta_parse("num_heads")?,
        context_len: c.meta_parse("context_len")?,
        seed: c.meta_parse("seed")?,
    };
    let layout = crate::model::Layout::new(&cfg);
    let mut data = Vec::with_capacity(layout.total);
    for (name, _, shape) in &layout.entries {
        let t = c.tensor(name)?;
        if t.len() != shape.iter().product::<usize>() {
            return Err(Error::Format(format!("tensor {name} has wrong size")));
        }
        data.extend_from_slice(t);
    }
    BaseWeights::from_parts(cfg, data)
}

pub fn save_model(w: &BaseWeights, path: &Path) -> Result<()> {
    model_to_container(w).save(path)
}

pub fn load_model(path: &Path) -> Result<BaseWeights> {
    model_from_container(&Container::load(path)?)
}

/// Intervention parameters together with the scope used at train time.
#[derive(Debug, Clone, PartialEq)]
pub struct InterventionCheckpoint {
    pub params: InterventionParams,
    pub scope: InterventionScope,
}

fn scope_kind_name(k: ScopeKind) -> &'static str {
    match k {
        ScopeKind::AllPositions => "all_positions",
        ScopeKind::ResponseOnly => "response_only",
    }
}

pub fn parse_scope_kind(s: &str) -> Result<ScopeKind> {
    match s {
        "all_positions" => Ok(ScopeKind::AllPositions),
        "response_only" => Ok(ScopeKind::ResponseOnly),
        other => Err(Error::Config(format!("unknown scope {other:?}"))),
    }
}

/// `unlimited` or a count.
pub fn parse_limit(s: &str) -> Result<Option<usize>> {
    if s == "unlimited" {
        Ok(None)
    } else {
        s.parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("bad count {s:?}")))
    }
}

pub fn format_limit(n: Option<usize>) -> String {
    n.map_or_else(|| "unlimited".to_string(), |n| n.to_string())
}

impl InterventionCheckpoint {
    pub fn to_container(&self) -> Container {
        let p = &self.params;
        let mut c = Container::default();
        c.push_meta("kind", "intervention");
        c.push_meta("dim", p.dim);
        let layers: Vec<String> = p.layers.iter().map(usize::to_string).collect();
        c.push_meta("layers", if layers.is_empty() { "-".into() } else { layers.join(",") });
        c.push_meta("scope", scope_kind_name(self.scope.kind));
        c.push_meta("n", format_limit(self.scope.n));
        for (slot, l) in p.layers.iter().enumerate() {
            c.push_tensor(&format!("scale.{l}"), vec![p.dim], p.scale(slot).to_vec());
            c.push_tensor(&format!("bias.{l}"), vec![p.dim], p.bias(slot).to_vec());
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind("intervention")?;
        let dim: usize = c.meta_parse("dim")?;
        let layers_s = c.meta("layers")?;
        let layers: Vec<usize> = if layers_s == "-" {
            Vec::new()
        } else {
            layers_s
                .split(',')
                .map(|s| s.parse().map_err(|_| Error::Format(format!("bad layer {s:?}"))))
                .collect::<Result<_>>()?
        };
        let mut params = InterventionParams::identity(dim, &layers);
        for (slot, l) in params.layers.clone().into_iter().enumerate() {
            let w = c.tensor(&format!("scale.{l}"))?;
            let b = c.tensor(&format!("bias.{l}"))?;
            crate::error::check_len(dim, w.len())?;
            crate::error::check_len(dim, b.len())?;
            params.scale_mut(slot).copy_from_slice(w);
            params.bias_mut(slot).copy_from_slice(b);
        }
        let scope = InterventionScope {
            kind: parse_scope_kind(c.meta("scope")?)?,
            n: parse_limit(c.meta("n")?)?,
        };
        Ok(Self { params, scope })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}
