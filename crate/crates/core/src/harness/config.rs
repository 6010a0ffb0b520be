use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::Params;
use crate::checkpoint::parse_scope_kind;
use crate::data::Split;
use crate::error::{Error, Result};
use crate::intervention::{InterventionScope, ScopeKind};
use crate::model::ModelConfig;
use crate::pid::PidGains;
use crate::train::OptimConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    BasePretrain,
    Brep,
    ReftFull,
    FrozenEval,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::BasePretrain => "base_pretrain",
            Mode::Brep => "brep",
            Mode::ReftFull => "reft_full",
            Mode::FrozenEval => "frozen_eval",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Mode::BasePretrain, Mode::Brep, Mode::ReftFull, Mode::FrozenEval]
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}")))
    }
}

/// Where training and evaluation examples come from.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    /// Reference to a corpus file; when absent the corpus is generated.
    pub corpus: Option<String>,
    pub seed: u64,
    pub count: usize,
    pub digit_min: u32,
    pub digit_max: u32,
}

impl DataConfig {
    pub fn from_params(p: &Params) -> Result<Self> {
        Ok(Self {
            corpus: p.get("corpus")?,
            seed: p.get_or("data_seed", 1)?,
            count: p.get_or("count", 50_000)?,
            digit_min: p.get_or("digit_min", 2)?,
            digit_max: p.get_or("digit_max", 4)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterventionConfig {
    /// `None` edits every block.
    pub layers: Option<Vec<usize>>,
    pub scope: ScopeKind,
    /// Response positions edited at inference (`n`).
    pub intervene_prefix: Option<usize>,
    /// Response tokens kept for training (`k`); `None` keeps everything.
    pub train_prefix: Option<usize>,
    pub freeze_scale: bool,
    /// Whether `scope` or `intervene_prefix` was set explicitly.
    pub explicit_scope: bool,
}

impl InterventionConfig {
    pub fn eval_scope(&self) -> InterventionScope {
        match self.scope {
            ScopeKind::AllPositions => InterventionScope::all_positions(),
            ScopeKind::ResponseOnly => InterventionScope::response_only(self.intervene_prefix),
        }
    }

    pub fn resolve_layers(&self, num_layers: usize) -> Result<Vec<usize>> {
        match &self.layers {
            None => Ok((0..num_layers).collect()),
            Some(ls) => {
                if let Some(l) = ls.iter().find(|&&l| l >= num_layers) {
                    return Err(Error::Config(format!("layer {l} out of range for {num_layers} blocks")));
                }
                Ok(ls.clone())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub split: Split,
    pub count: usize,
    pub max_new: usize,
    /// Steps between periodic evaluations; 0 evaluates only after the last step.
    pub every: usize,
}

/// Everything a training or evaluation run needs, read from one flat
/// settings file.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    /// Base architecture; only read for `base_pretrain`.
    pub model: ModelConfig,
    /// Reference to the base checkpoint for every other mode.
    pub base: Option<String>,
    /// Reference to an intervention checkpoint (`frozen_eval` only).
    pub intervention_checkpoint: Option<String>,
    pub data: DataConfig,
    pub intervention: InterventionConfig,
    pub optim: OptimConfig,
    pub pid: Option<PidGains>,
    pub eval: EvalConfig,
}

fn read_layers(p: &Params) -> Result<Option<Vec<usize>>> {
    match p.get::<toml::Value>("layers")? {
        None => Ok(None),
        Some(toml::Value::String(s)) if s == "all" => Ok(None),
        Some(v) => v
            .try_into::<Vec<usize>>()
            .map(Some)
            .map_err(|_| Error::Config(format!("{}: layers must be \"all\" or a list of block indices", p.context()))),
    }
}

impl RunConfig {
    /// Reads every key for `mode` and rejects keys that do not apply.
    pub fn from_params(mode: Mode, p: &Params) -> Result<Self> {
        let training = matches!(mode, Mode::BasePretrain | Mode::Brep | Mode::ReftFull);
        let model = if mode == Mode::BasePretrain {
            let d = ModelConfig::default();
            let m = ModelConfig {
                vocab_size: p.get_or("vocab_size", d.vocab_size)?,
                embed_dim: p.get_or("embed_dim", d.embed_dim)?,
                num_layers: p.get_or("num_layers", d.num_layers)?,
                num_heads: p.get_or("num_heads", d.num_heads)?,
                context_len: p.get_or("context_len", d.context_len)?,
                seed: p.get_or("model_seed", d.seed)?,
            };
            m.validate()?;
            m.check_alphabet()?;
            m
        } else {
            ModelConfig::default()
        };
        let base = if mode == Mode::BasePretrain {
            None
        } else {
            Some(p.require::<String>("base")?)
        };
        let intervention_checkpoint = if mode == Mode::FrozenEval {
            p.get("intervention")?
        } else {
            None
        };
        let data = DataConfig::from_params(p)?;

        let intervention = match mode {
            Mode::Brep | Mode::FrozenEval => {
                let explicit_scope = p.contains("scope") || p.contains("intervene_prefix");
                let scope = p
                    .get::<String>("scope")?
                    .map(|s| parse_scope_kind(&s))
                    .transpose()?
                    .unwrap_or(ScopeKind::ResponseOnly);
                InterventionConfig {
                    layers: if mode == Mode::Brep { read_layers(p)? } else { None },
                    scope,
                    intervene_prefix: p.get_limit("intervene_prefix", Some(8))?,
                    train_prefix: if mode == Mode::Brep {
                        p.get_limit("train_prefix", Some(64))?
                    } else {
                        None
                    },
                    freeze_scale: if mode == Mode::Brep { p.get_or("freeze_scale", false)? } else { false },
                    explicit_scope,
                }
            }
            Mode::ReftFull => InterventionConfig {
                layers: read_layers(p)?,
                scope: ScopeKind::ResponseOnly,
                intervene_prefix: None,
                train_prefix: None,
                freeze_scale: p.get_or("freeze_scale", false)?,
                explicit_scope: false,
            },
            Mode::BasePretrain => InterventionConfig {
                layers: None,
                scope: ScopeKind::ResponseOnly,
                intervene_prefix: None,
                train_prefix: None,
                freeze_scale: false,
                explicit_scope: false,
            },
        };
        if intervention.train_prefix == Some(0) {
            return Err(Error::Config(format!("{}: train_prefix must be at least 1", p.context())));
        }

        let optim = if training {
            let base_defaults = mode == Mode::BasePretrain;
            let steps: usize = p.get_or("steps", if base_defaults { 6000 } else { 600 })?;
            OptimConfig {
                lr: p.get_or("lr", if base_defaults { 1e-3 } else { 2e-4 })?,
                steps,
                batch_size: p.get_or("batch_size", 32)?,
                warmup: p.get_or("warmup", if base_defaults { steps / 20 } else { 0 })?,
                cosine: p.get_or("cosine", base_defaults)?,
                clip: {
                    let c: f64 = p.get_or("clip", if base_defaults { 1.0 } else { 0.0 })?;
                    (c > 0.0).then_some(c)
                },
                seed: p.get_or("train_seed", 0)?,
            }
        } else {
            OptimConfig {
                lr: 0.0,
                steps: 0,
                batch_size: 1,
                warmup: 0,
                cosine: false,
                clip: None,
                seed: 0,
            }
        };
        if training && (optim.batch_size == 0 || !(optim.lr > 0.0)) {
            return Err(Error::Config(format!("{}: batch_size and lr must be positive", p.context())));
        }

        let pid = if mode == Mode::Brep {
            let d = PidGains::default();
            let g = PidGains {
                kp: p.get_or("kp", d.kp)?,
                ki: p.get_or("ki", d.ki)?,
                kd: p.get_or("kd", d.kd)?,
                alpha_smooth: p.get_or("alpha_smooth", d.alpha_smooth)?,
                w_min: p.get_or("w_min", d.w_min)?,
                w_max: p.get_or("w_max", d.w_max)?,
                b_target: p.get_or("b_target", d.b_target)?,
                w_init: p.get_or("w_init", d.w_init)?,
            };
            g.validate()?;
            Some(g)
        } else {
            None
        };

        let eval = EvalConfig {
            split: p
                .get::<String>("eval_split")?
                .map(|s| s.parse())
                .transpose()?
                .unwrap_or(if training { Split::Validation } else { Split::Test }),
            count: p.get_or("eval_count", 200)?,
            max_new: p.get_or("max_new", 16)?,
            every: if training { p.get_or("eval_every", 0)? } else { 0 },
        };
        p.finish()?;
        Ok(Self {
            mode,
            model,
            base,
            intervention_checkpoint,
            data,
            intervention,
            optim,
            pid,
            eval,
        })
    }
}
