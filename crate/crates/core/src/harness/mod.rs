//! Config-driven orchestration shared by the command line and the suite
//! runner.

mod config;
mod jobs;
mod params;
mod suite;

pub use config::{DataConfig, EvalConfig, InterventionConfig, Mode, RunConfig};
pub use jobs::{output_root, render, run_job, Artifact, JobContext, JobKind, PathResolver, Resolver, Summary};
pub use params::Params;
pub use suite::{run_experiment_suite, JobSpec, Manifest, SuiteReport};
