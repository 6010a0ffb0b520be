use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use brep_core::harness::{
    output_root, render, run_experiment_suite, run_job, JobContext, JobKind, Manifest, Params, PathResolver,
};
use clap::{Args, Parser, Subcommand};

/// Bias-restrained prefix representation finetuning lab.
///
/// Every command reads a flat `key = value` settings file (TOML syntax) and
/// writes into `$BREP_OUT/<name>` (default root `runs`).
#[derive(Parser)]
#[command(name = "brep", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the addition corpus
    GenData(JobArgs),
    /// Pretrain the base model
    TrainBase(JobArgs),
    /// Train a bias-restrained prefix intervention on a frozen base
    TrainBrep(JobArgs),
    /// Train the unconstrained full-response intervention
    TrainReft(JobArgs),
    /// Greedy exact-match evaluation
    Eval(JobArgs),
    /// Prefix-guided continuation accuracy
    PrefixEval(JobArgs),
    /// Fit a numerical ridge probe
    FitProbe(JobArgs),
    /// Directional intervention sweep along a probe direction
    Sweep(JobArgs),
    /// Faithfulness probe accuracy and gap matrices
    Faithfulness(JobArgs),
    /// Bias cosine-similarity matrix across runs
    Similarity(JobArgs),
    /// Run a manifest of jobs in dependency order
    Suite(SuiteArgs),
}

#[derive(Args)]
struct JobArgs {
    /// Settings file
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override or add a setting, e.g. `--set steps=100`
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output folder name under the output root (default: config file stem)
    #[arg(long)]
    name: Option<String>,
}

#[derive(Args)]
struct SuiteArgs {
    manifest: PathBuf,
    /// Bundle folder name under the output root (default: manifest stem)
    #[arg(long)]
    name: Option<String>,
}

/// Parses the right-hand side as a TOML value, falling back to a string.
fn parse_override(s: &str) -> Result<(String, toml::Value)> {
    let Some((k, v)) = s.split_once('=') else {
        bail!("override {s:?} is not KEY=VALUE");
    };
    let k = k.trim().to_string();
    let v = v.trim();
    let value = format!("x = {v}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("x"))
        .unwrap_or_else(|| toml::Value::String(v.to_string()));
    Ok((k, value))
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into())
}

fn run_single(kind: JobKind, args: JobArgs) -> Result<String> {
    let mut params = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            Params::parse(&path.display().to_string(), &text)?
        }
        None => Params::parse(kind.as_str(), "")?,
    };
    for o in &args.overrides {
        let (k, v) = parse_override(o)?;
        params.set(&k, v);
    }
    let name = args
        .name
        .or_else(|| args.config.as_deref().map(stem))
        .unwrap_or_else(|| kind.as_str().to_string());
    let out_dir = output_root().join(name);
    let resolver = PathResolver { root: PathBuf::from(".") };
    let ctx = JobContext {
        out_dir: out_dir.clone(),
        resolver: &resolver,
    };
    let summary = run_job(kind, &params, &ctx)?;
    let text = render(&summary);
    brep_core::io::write_atomic(&out_dir.join("summary.txt"), text.as_bytes())?;
    Ok(format!("wrote {}\n{text}", out_dir.display()))
}

fn run(cli: Cli) -> Result<String> {
    let kind = match cli.command {
        Command::Suite(args) => {
            let manifest = Manifest::load(&args.manifest)
                .with_context(|| format!("loading manifest {}", args.manifest.display()))?;
            let out = output_root().join(args.name.unwrap_or_else(|| stem(&args.manifest)));
            let report = run_experiment_suite(&manifest, &out)?;
            return Ok(format!("wrote {}\n{}", out.display(), report.render()));
        }
        Command::GenData(a) => (JobKind::GenData, a),
        Command::TrainBase(a) => (JobKind::TrainBase, a),
        Command::TrainBrep(a) => (JobKind::TrainBrep, a),
        Command::TrainReft(a) => (JobKind::TrainReft, a),
        Command::Eval(a) => (JobKind::Eval, a),
        Command::PrefixEval(a) => (JobKind::PrefixEval, a),
        Command::FitProbe(a) => (JobKind::FitProbe, a),
        Command::Sweep(a) => (JobKind::Sweep, a),
        Command::Faithfulness(a) => (JobKind::Faithfulness, a),
        Command::Similarity(a) => (JobKind::Similarity, a),
    };
    run_single(kind.0, kind.1)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
