use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use super::config::{Mode, RunConfig};
use super::Params;
use crate::checkpoint::{load_model, save_model, InterventionCheckpoint};
use crate::data::{generate_arithmetic, read_corpus, split_of, write_corpus, CorpusRecord, RawExample, Split, TrainExample};
use crate::error::{Error, Result};
use crate::eval::{evaluate, prefix_guided_eval, SamplingConfig, Steering};
use crate::intervention::{bias_cosine_similarity, mean_bias_norm};
use crate::io::write_atomic;
use crate::model::BaseWeights;
use crate::probe::{
    collect_hidden, directional_sweep, faithfulness_matrix, fit_ridge_probe, pearson, probe_predict, sweep_csv,
    LogisticConfig, NumericalProbe, PositionTag, SweepConfig, GAP_COLUMNS,
};
use crate::tokenizer::tokenize;
use crate::train::{train_base, train_intervention, EvalPlan, InterventionTrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum JobKind {
    GenData,
    TrainBase,
    TrainBrep,
    TrainReft,
    Eval,
    PrefixEval,
    FitProbe,
    Sweep,
    Faithfulness,
    Similarity,
}

impl JobKind {
    pub const ALL: [JobKind; 10] = [
        JobKind::GenData,
        JobKind::TrainBase,
        JobKind::TrainBrep,
        JobKind::TrainReft,
        JobKind::Eval,
        JobKind::PrefixEval,
        JobKind::FitProbe,
        JobKind::Sweep,
        JobKind::Faithfulness,
        JobKind::Similarity,
    ];

    /// Manifest spelling; the CLI uses the same words with dashes.
    pub fn as_str(self) -> &'static str {
        match self {
            JobKind::GenData => "gen_data",
            JobKind::TrainBase => "train_base",
            JobKind::TrainBrep => "train_brep",
            JobKind::TrainReft => "train_reft",
            JobKind::Eval => "eval",
            JobKind::PrefixEval => "prefix_eval",
            JobKind::FitProbe => "fit_probe",
            JobKind::Sweep => "sweep",
            JobKind::Faithfulness => "faithfulness",
            JobKind::Similarity => "similarity",
        }
    }

    /// The artifact other jobs can reference by this job's name.
    pub fn produces(self) -> Option<Artifact> {
        match self {
            JobKind::GenData => Some(Artifact::Corpus),
            JobKind::TrainBase => Some(Artifact::Model),
            JobKind::TrainBrep | JobKind::TrainReft => Some(Artifact::Intervention),
            JobKind::FitProbe => Some(Artifact::Probe),
            _ => None,
        }
    }

    /// Keys holding references to artifacts, with the artifact expected.
    pub fn reference_keys(self) -> &'static [(&'static str, Artifact)] {
        use Artifact::*;
        match self {
            JobKind::GenData => &[],
            JobKind::TrainBase => &[("corpus", Corpus)],
            JobKind::TrainBrep | JobKind::TrainReft => &[("base", Model), ("corpus", Corpus)],
            JobKind::Eval | JobKind::PrefixEval | JobKind::FitProbe => {
                &[("base", Model), ("intervention", Intervention), ("corpus", Corpus)]
            }
            JobKind::Sweep => &[("base", Model), ("probe", Probe), ("corpus", Corpus)],
            JobKind::Faithfulness => &[
                ("base", Model),
                ("intervention", Intervention),
                ("compare", Intervention),
                ("corpus", Corpus),
            ],
            JobKind::Similarity => &[("runs", Intervention)],
        }
    }
}

impl fmt::Display for JobKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for JobKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.replace('-', "_");
        JobKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown job kind {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Artifact {
    Corpus,
    Model,
    Intervention,
    Probe,
}

impl Artifact {
    pub fn file_name(self) -> &'static str {
        match self {
            Artifact::Corpus => "corpus.jsonl",
            Artifact::Model => "model.ckpt",
            Artifact::Intervention => "intervention.ckpt",
            Artifact::Probe => "probe.bin",
        }
    }
}

/// Turns a reference value (a path, or in a suite a job name) into a file.
pub trait Resolver {
    fn resolve(&self, value: &str, want: Artifact) -> Result<PathBuf>;
}

/// References are plain paths, relative to `root`.
pub struct PathResolver {
    pub root: PathBuf,
}

impl Resolver for PathResolver {
    fn resolve(&self, value: &str, _want: Artifact) -> Result<PathBuf> {
        Ok(self.root.join(value))
    }
}

pub struct JobContext<'a> {
    pub out_dir: PathBuf,
    pub resolver: &'a dyn Resolver,
}

/// Ordered `key = value` lines reported by a finished job.
pub type Summary = Vec<(String, String)>;

fn put(s: &mut Summary, key: &str, value: impl ToString) {
    s.push((key.to_string(), value.to_string()));
}

impl JobContext<'_> {
    fn path(&self, p: &Params, key: &str, want: Artifact) -> Result<Option<PathBuf>> {
        match p.get::<String>(key)? {
            None => Ok(None),
            Some(v) => {
                let path = self.resolver.resolve(&v, want)?;
                if !path.exists() {
                    return Err(Error::Config(format!("{key} = {v:?}: {} does not exist", path.display())));
                }
                Ok(Some(path))
            }
        }
    }

    fn require_path(&self, p: &Params, key: &str, want: Artifact) -> Result<PathBuf> {
        self.path(p, key, want)?
            .ok_or_else(|| Error::Config(format!("{}: key {key:?} is required", p.context())))
    }

    fn write(&self, name: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.out_dir.join(name), bytes)
    }
}

/// Runs one job, writing its outputs under `ctx.out_dir`.
pub fn run_job(kind: JobKind, p: &Params, ctx: &JobContext<'_>) -> Result<Summary> {
    std::fs::create_dir_all(&ctx.out_dir)?;
    match kind {
        JobKind::GenData => gen_data(p, ctx),
        JobKind::TrainBase => train_base_job(p, ctx),
        JobKind::TrainBrep => train_intervention_job(Mode::Brep, p, ctx),
        JobKind::TrainReft => train_intervention_job(Mode::ReftFull, p, ctx),
        JobKind::Eval => eval_job(p, ctx),
        JobKind::PrefixEval => prefix_eval_job(p, ctx),
        JobKind::FitProbe => fit_probe_job(p, ctx),
        JobKind::Sweep => sweep_job(p, ctx),
        JobKind::Faithfulness => faithfulness_job(p, ctx),
        JobKind::Similarity => similarity_job(p, ctx),
    }
}

fn gen_data(p: &Params, ctx: &JobContext<'_>) -> Result<Summary> {
    let seed = p.get_or("data_seed", 1)?;
    let count = p.get_or("count", 50_000)?;
    let digit_min = p.get_or("digit_min", 2)?;
    let digit_max = p.get_or("digit_max", 4)?;
    p.finish()?;
    let records = generate_arithmetic(seed, count, digit_min, digit_max)?;
    write_corpus(&ctx.out_dir.join(Artifact::Corpus.file_name()), &records)?;
    let mut s = Summary::new();
    for split in [Split::Train, Split::Validation, Split::Test] {
        put(&mut s, &format!("{split}_count"), records.iter().filter(|r| r.split == split).count());
    }
    Ok(s)
}

/// Corpus from a referenced file, or generated from the data keys.
fn corpus(p: &Params, ctx: &JobContext<'_>) -> Result<Vec<CorpusRecord>> {
    let data = super::config::DataConfig::from_params(p)?;
    corpus_from(&data, p, ctx)
}

fn corpus_from(data: &super::config::DataConfig, p: &Params, ctx: &JobContext<'_>) -> Result<Vec<CorpusRecord>> {
    match &data.corpus {
        Some(_) => read_corpus(&ctx.require_path(p, "corpus", Artifact::Corpus)?),
        None => generate_arithmetic(data.seed, data.count, data.digit_min, data.digit_max),
    }
}

fn tokenized(raw: &[RawExample]) -> Result<Vec<TrainExample>> {
    raw.iter().map(TrainExample::from_raw).collect()
}

fn take(mut v: Vec<RawExample>, n: usize) -> Vec<RawExample> {
    v.truncate(n);
    v
}

fn check_fits(weights: &BaseWeights, examples: &[TrainExample]) -> Result<()> {
    weights.config.check_alphabet()?;
    if let Some(ex) = examples.iter().find(|e| e.prompt_tokens.len() + e.response_tokens.len() > weights.config.context_len) {
        return Err(Error::Length {
            len: ex.prompt_tokens.len() + ex.response_tokens.len(),
            max: weights.config.context_len,
        });
    }
    Ok(())
}

fn last_eval(s: &mut Summary, metrics: &crate::metrics::RunMetrics) {
    if let Some(e) = metrics.evals.last() {
        put(s, "token_accuracy", e.token_accuracy);
        if let Some(em) = e.exact_match {
            put(s, "exact_match", em);
        }
    }
}

fn train_base_job(p: &Params, ctx: &JobContext<'_>) -> Result<Summary> {
    let cfg = RunConfig::from_params(Mode::BasePretrain, p)?;
    let records = corpus_from(&cfg.data, p, ctx)?;
    let train = tokenized(&split_of(&records, Split::Train))?;
    let eval = tokenized(&take(split_of(&records, cfg.eval.split), cfg.eval.count))?;
    let init = BaseWeights::init(cfg.model)?;
    check_fits(&init, &train)?;
    let plan = (!eval.is_empty()).then_some(EvalPlan {
        examples: &eval,
        every: if cfg.eval.every == 0 { cfg.optim.steps.max(1) } else { cfg.eval.every },
    });
    let (weights, metrics) = train_base(init, &train, &cfg.optim, plan)?;
    save_model(&weights, &ctx.out_dir.join(Artifact::Model.file_name()))?;
    ctx.write("metrics.jsonl", metrics.to_jsonl().as_bytes())?;
    let mut s = Summary::new();
    put(&mut s, "params", weights.num_params());
    put(&mut s, "steps", metrics.steps.len());
    if let (Some(first), Some(last)) = (metrics.steps.first(), metrics.steps.last()) {
        put(&mut s, "loss_first", first.loss_ce);
        put(&mut s, "loss_last", last.loss_ce);
    }
    last_eval(&mut s, &metrics);
    put(&mut s, "digest", weights.digest());
    Ok(s)
}

fn train_intervention_job(mode: Mode, p: &Params, ctx: &JobContext<'_>) -> Result<Summary> {
    let cfg = RunConfig::from_params(mode, p)?;
    let base = load_model(&ctx.require_path(p, "base", Artifact::Model)?)?;
    let records = corpus_from(&cfg.data, p, ctx)?;
    let train = tokenized(&split_of(&records, Split::Train))?;
    let eval = tokenized(&take(split_of(&records, cfg.eval.split), cfg.eval.count))?;
    check_fits(&base, &train)?;
    let layers = cfg.intervention.resolve_layers(base.config.num_layers)?;
    let mut tc = match mode {
        Mode::Brep => InterventionTrainConfig::brep(
            layers,
            cfg.intervention.train_prefix.unwrap_or(usize::MAX),
            cfg.optim,
            cfg.pid.expect("brep mode reads PID gains"),
        ),
        _ => InterventionTrainConfig::reft_full(layers, cfg.optim),
    };
    if mode == Mode::Brep && cfg.intervention.train_prefix.is_none() {
        tc.k = None;
    }
    tc.freeze_scale = cfg.intervention.freeze_scale;
    tc.eval_scope = cfg.intervention.eval_scope();
    tc.eval_max_new = cfg.eval.max_new;
    let plan = (!eval.is_empty()).then_some(EvalPlan {
        examples: &eval,
        every: if cfg.eval.every == 0 { cfg.optim.steps.max(1) } else { cfg.eval.every },
    });
    let digest = base.digest();
    let (params, metrics) = train_intervention(&base, &train, &tc, plan)?;
    InterventionCheckpoint {
        params: params.clone(),
        scope: tc.eval_scope,
    }
    .save(&ctx.out_dir.join(Artifact::Intervention.file_name()))?;
    ctx.write("metrics.jsonl", metrics.to_jsonl().as_bytes())?;
    let mut s = Summary::new();
    put(&mut s, "mode", mode);
    put(&mut s, "steps", metrics.steps.len());
    if let Some(last) = metrics.steps.last() {
        put(&mut s, "loss_last", last.loss_ce);
        put(&mut s, "w_last", last.w);
    }
    put(&mut s, "bias_norm", mean_bias_norm(&params)?);
    last_eval(&mut s, &metrics);
    put(&mut s, "base_digest", digest);
    Ok(s)
}

/// Base model plus the optional intervention referenced by `key`.
fn load_steering(p: &Params, ctx: &JobContext<'_>, key: &str) -> Result<Option<InterventionCheckpoint>> {
    ctx.path(p, key, Artifact::Intervention)?
        .map(|path| InterventionCheckpoint::load(&path))
        .transpose()
}

fn steering_of(ck: &Option<InterventionCheckpoint>) -> Option<Steering<'_>> {
    ck.as_ref().map(|c| Steering {
        params: &c.params,
        scope: c.scope,
    })
}

fn eval_job(p: &Params, ctx: &JobContext<'_>) -> Result<Summary> {
    let cfg = RunConfig::from_params(Mode::FrozenEval, p)?;
    let base = load_model(&ctx.require_path(p, "base", Artifact::Model)?)?;
    let mut ck = load_steering(p, ctx, "intervention")?;
    if let Some(c) = ck.as_mut() {
        if cfg.intervention.explicit_scope {
            c.scope = cfg.intervention.eval_scope();
        }
    }
    let records = corpus_from(&cfg.data, p, ctx)?;
    let examples = take(split_of(&records, cfg.eval.split), cfg.eval.count);
    let report = evaluate(&base, steering_of(&ck), &examples, cfg.eval.max_new)?;
    let mut items = Vec::new();
    crate::data::write_jsonl(&mut items, &report.items)?;
    ctx.write("items.jsonl", &items)?;
    let mut s = Summary::new();
    put(&mut s, "accuracy", report.accuracy);
    put(&mut s, "correct", report.correct);
    put(&mut s, "total", report.total);
    put(&mut s, "unparseable", report.unparseable);
    if let Some(c) = &ck {
        put(&mut s, "intervene_prefix", crate::checkpoint::format_limit(c.scope.n));
    }
    ctx.write("report.txt", render(&s).as_bytes())?;
    Ok(s)
}

fn prefix_eval_job(p: &Params, ctx: &JobContext<'_>) -> Result<Summary> {
    let base = load_model(&ctx.require_path(p, "base", Artifact::Model)?)?;
    let ck = load_steering(p, ctx, "intervention")?;
    let records = corpus(p, ctx)?;
    let split: Split = p.get_or("eval_split", "test".to_string())?.parse()?;
    let count = p.get_or("eval_count", 100)?;
    let lengths: Vec<usize> = p.get_or("prefix_lengths", vec![0, 1, 2, 3, 4])?;
    let d = SamplingConfig::default();
    let cfg = SamplingConfig {
        samples_per_item: p.get_or("samples", d.samples_per_item)?,
        temperature: p.get_or("temperature", d.temperature)?,
        seed: p.get_or("seed", d.seed)?,
        max_new: p.get_or("max_new", d.max_new)?,
    };
    p.finish()?;
    let examples = take(split_of(&records, split), count);
    let rows = prefix_guided_eval(&base, steering_of(&ck), &base, &examples, &lengths, &cfg)?;
    let mut csv = String::from("prefix_len,accuracy,correct,samples\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{},{}\n", r.prefix_len, r.accuracy, r.correct, r.samples));
    }
    ctx.write("prefix.csv", csv.as_bytes())?;
    let mut s = Summary::new();
    for r in &rows {
        put(&mut s, &format!("accuracy_m{}", r.prefix_len), r.accuracy);
    }
    Ok(s)
}

/// Probe target for a tagged position: the operand or the sum.
fn probe_target(ex: &RawExample, tag: PositionTag) -> Result<f64> {
    let (a, b) = ex
        .operands()
        .ok_or_else(|| Error::Domain(format!("cannot read operands of {:?}", ex.question)))?;
    Ok(match tag {
        PositionTag::FirstNumber => a as f64,
        PositionTag::SecondNumber => b as f64,
        PositionTag::LastToken => (a + b) as f64,
    })
}

fn fit_probe_job(p: &Params, ctx: &JobContext<'_>) -> Result<Summary> {
    let base = load_model(&ctx.require_path(p, "base", Artifact::Model)?)?;
    let ck = load_steering(p, ctx, "intervention")?;
    let records = corpus(p, ctx)?;
    let layer: usize = p.require("layer")?;
    let tag: PositionTag = p.get_or("position", "last_token".to_string())?.parse()?;
    let lambda: f64 = p.get_or("lambda", 0.1)?;
    let train_count = p.get_or("train_count", 2000)?;
    let eval_count = p.get_or("eval_count", 200)?;
    let label: String = p.get_or("label", "base".to_string())?;
    p.finish()?;
    let fit_on = take(split_of(&records, Split::Train), train_count);
    let held = take(split_of(&records, Split::Validation), eval_count);
    let hidden = |xs: &[RawExample]| -> Result<Vec<Vec<f64>>> {
        let prompts = xs.iter().map(|e| tokenize(&e.question)).collect::<Result<Vec<_>>>()?;
        collect_hidden(&base, steering_of(&ck), &prompts, layer, tag)
    };
    let targets = |xs: &[RawExample]| xs.iter().map(|e| probe_target(e, tag)).collect::<Result<Vec<_>>>();
    let probe = fit_ridge_probe(&hidden(&fit_on)?, &targets(&fit_on)?, lambda, layer, tag, &label)?;
    let h = hidden(&held)?;
    let pred = h.iter().map(|x| probe_predict(&probe, x)).collect::<Result<Vec<_>>>()?;
    let truth: Vec<f64> = targets(&held)?.iter().map(|v| v.log2()).collect();
    let r = pearson(&pred, &truth)?;
    probe.save(&ctx.out_dir.join(Artifact::Probe.file_name()))?;
    let mut s = Summary::new();
    put(&mut s, "layer", layer);
    put(&mut s, "position", tag);
    put(&mut s, "heldout_pearson", r);
    put(&mut s, "weight_norm", crate::ops::norm(&probe.weights));
    Ok(s)
}

fn sweep_job(p: &Params, ctx: &JobContext<'_>) -> Result<Summary> {
    let base = load_model(&ctx.require_path(p, "base", Artifact::Model)?)?;
    let probe = NumericalProbe::load(&ctx.require_path(p, "probe", Artifact::Probe)?)?;
    let records = corpus(p, ctx)?;
    let split: Split = p.get_or("eval_split", "test".to_string())?.parse()?;
    let count = p.get_or("eval_count", 100)?;
    let layers = match p.get::<Vec<usize>>("layers")? {
        Some(l) => l,
        None => (0..base.config.num_layers).collect(),
    };
    let cfg = SweepConfig {
        deltas: p.get_or("deltas", vec![0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0, 8.0])?,
        layers,
        max_new: p.get_or("max_new", 16)?,
    };
    p.finish()?;
    let examples = take(split_of(&records, split), count);
    let result = directional_sweep(&base, &probe.direction()?, &cfg, &examples)?;
    ctx.write("sweep.csv", sweep_csv(&result).as_bytes())?;
    let rates: Vec<f64> = result.points.iter().map(|pt| pt.error_rate).collect();
    let mut s = Summary::new();
    put(&mut s, "excluded", result.excluded.len());
    if let Ok(rho) = crate::probe::spearman(&cfg.deltas, &rates) {
        put(&mut s, "spearman", rho);
    }
    Ok(s)
}

fn matrix_csv(m: &[Vec<f64>]) -> String {
    let mut csv = format!("layer,{}\n", GAP_COLUMNS.join(","));
    for (l, row) in m.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(f64::to_string).collect();
        csv.push_str(&format!("{l},{}\n", cells.join(",")));
    }
    csv
}

fn faithfulness_job(p: &Params, ctx: &JobContext<'_>) -> Result<Summary> {
    let base = load_model(&ctx.require_path(p, "base", Artifact::Model)?)?;
    let a = load_steering(p, ctx, "intervention")?;
    let b = load_steering(p, ctx, "compare")?;
    let records = corpus(p, ctx)?;
    let split: Split = p.get_or("eval_split", "validation".to_string())?.parse()?;
    let count = p.get_or("eval_count", 400)?;
    let cfg = LogisticConfig {
        seed: p.get_or("seed", 0)?,
        ..LogisticConfig::default()
    };
    p.finish()?;
    let examples = take(split_of(&records, split), count);
    let ma = faithfulness_matrix(&base, steering_of(&a), &examples, &cfg)?;
    let mb = faithfulness_matrix(&base, steering_of(&b), &examples, &cfg)?;
    let gap: Vec<Vec<f64>> = ma
        .iter()
        .zip(&mb)
        .map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| x - y).collect())
        .collect();
    ctx.write("accuracy_a.csv", matrix_csv(&ma).as_bytes())?;
    ctx.write("accuracy_b.csv", matrix_csv(&mb).as_bytes())?;
    ctx.write("gap.csv", matrix_csv(&gap).as_bytes())?;
    let mean = |m: &[Vec<f64>]| m.iter().flatten().sum::<f64>() / m.iter().map(Vec::len).sum::<usize>() as f64;
    let mut s = Summary::new();
    put(&mut s, "mean_accuracy_a", mean(&ma));
    put(&mut s, "mean_accuracy_b", mean(&mb));
    put(&mut s, "mean_gap", mean(&gap));
    Ok(s)
}

fn similarity_job(p: &Params, ctx: &JobContext<'_>) -> Result<Summary> {
    let runs: Vec<String> = p.require("runs")?;
    let labels: Vec<String> = p.get_or("labels", runs.clone())?;
    p.finish()?;
    if labels.len() != runs.len() {
        return Err(Error::Config("labels and runs differ in length".into()));
    }
    let cks = runs
        .iter()
        .map(|r| {
            let path = ctx.resolver.resolve(r, Artifact::Intervention)?;
            if !path.exists() {
                return Err(Error::Config(format!("runs entry {r:?}: {} does not exist", path.display())));
            }
            InterventionCheckpoint::load(&path)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut csv = format!("run,{}\n", labels.join(","));
    for (i, a) in cks.iter().enumerate() {
        let row = cks
            .iter()
            .map(|b| bias_cosine_similarity(&a.params, &b.params).map(|c| c.to_string()))
            .collect::<Result<Vec<_>>>()?;
        csv.push_str(&format!("{},{}\n", labels[i], row.join(",")));
    }
    ctx.write("similarity.csv", csv.as_bytes())?;
    let mut s = Summary::new();
    for (l, c) in labels.iter().zip(&cks) {
        put(&mut s, &format!("bias_norm_{l}"), mean_bias_norm(&c.params)?);
    }
    Ok(s)
}

/// `key = value` lines.
pub fn render(s: &Summary) -> String {
    s.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

/// Default output folder for a CLI run: `$BREP_OUT/<name>` or `runs/<name>`.
pub fn output_root() -> PathBuf {
    std::env::var_os("BREP_OUT").map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}
