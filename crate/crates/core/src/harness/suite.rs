use std::collections::HashMap;
use std::path::{Path, PathBuf};

use toml::{Table, Value};

use super::jobs::{render, run_job, Artifact, JobContext, JobKind, Resolver, Summary};
use super::Params;
use crate::error::{Error, Result};
use crate::io::write_atomic;

/// One `[[job]]` entry of a manifest.
#[derive(Debug, Clone)]
pub struct JobSpec {
    pub name: String,
    pub kind: JobKind,
    pub table: Table,
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub jobs: Vec<JobSpec>,
    /// Relative paths in references resolve against this folder.
    pub root: PathBuf,
}

fn valid_name(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

impl Manifest {
    pub fn parse(text: &str, root: &Path) -> Result<Self> {
        let mut top: Table = text.parse().map_err(|e| Error::Config(format!("manifest: {e}")))?;
        let entries = match top.remove("job") {
            None => Vec::new(),
            Some(Value::Array(a)) => a,
            Some(_) => return Err(Error::Config("manifest: `job` must be an array of tables".into())),
        };
        if let Some(k) = top.keys().next() {
            return Err(Error::Config(format!("manifest: unknown top-level key {k:?}")));
        }
        let mut jobs: Vec<JobSpec> = Vec::new();
        for (i, e) in entries.into_iter().enumerate() {
            let Value::Table(mut table) = e else {
                return Err(Error::Config(format!("manifest: job #{i} is not a table")));
            };
            let name = match table.remove("name") {
                Some(Value::String(s)) if valid_name(&s) => s,
                _ => return Err(Error::Config(format!("manifest: job #{i} needs a name of [A-Za-z0-9_-]"))),
            };
            let kind = match table.remove("kind") {
                Some(Value::String(s)) => s.parse()?,
                _ => return Err(Error::Config(format!("manifest: job {name:?} needs a kind"))),
            };
            if jobs.iter().any(|j| j.name == name) {
                return Err(Error::Config(format!("manifest: duplicate job name {name:?}")));
            }
            jobs.push(JobSpec { name, kind, table });
        }
        Ok(Self {
            jobs,
            root: root.to_path_buf(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Reference values of a job, with the artifact each one must provide.
    fn references(job: &JobSpec) -> Vec<(String, Artifact)> {
        let mut out = Vec::new();
        for &(key, want) in job.kind.reference_keys() {
            match job.table.get(key) {
                Some(Value::String(s)) => out.push((s.clone(), want)),
                Some(Value::Array(a)) => out.extend(a.iter().filter_map(|v| v.as_str()).map(|s| (s.to_string(), want))),
                _ => {}
            }
        }
        out
    }

    /// Dependency order; ties keep manifest order.
    pub fn order(&self) -> Result<Vec<usize>> {
        let index: HashMap<&str, usize> = self.jobs.iter().enumerate().map(|(i, j)| (j.name.as_str(), i)).collect();
        let deps: Vec<Vec<usize>> = self
            .jobs
            .iter()
            .map(|j| {
                Self::references(j)
                    .iter()
                    .filter_map(|(r, _)| index.get(r.as_str()).copied())
                    .collect()
            })
            .collect();
        let mut done = vec![false; self.jobs.len()];
        let mut order = Vec::with_capacity(self.jobs.len());
        while order.len() < self.jobs.len() {
            let next = (0..self.jobs.len()).find(|&i| !done[i] && deps[i].iter().all(|&d| done[d]));
            match next {
                Some(i) => {
                    done[i] = true;
                    order.push(i);
                }
                None => {
                    let stuck: Vec<&str> = (0..self.jobs.len())
                        .filter(|&i| !done[i])
                        .map(|i| self.jobs[i].name.as_str())
                        .collect();
                    return Err(Error::Config(format!("manifest: dependency cycle among {}", stuck.join(", "))));
                }
            }
        }
        Ok(order)
    }
}

struct SuiteResolver<'a> {
    manifest: &'a Manifest,
    out_root: &'a Path,
}

impl Resolver for SuiteResolver<'_> {
    fn resolve(&self, value: &str, want: Artifact) -> Result<PathBuf> {
        match self.manifest.jobs.iter().find(|j| j.name == value) {
            Some(j) if j.kind.produces() == Some(want) => Ok(self.out_root.join(&j.name).join(want.file_name())),
            Some(j) => Err(Error::Config(format!(
                "job {value:?} ({}) does not produce a {}",
                j.kind,
                want.file_name()
            ))),
            None => Ok(self.manifest.root.join(value)),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct SuiteReport {
    /// `(job, kind, summary)` in execution order.
    pub jobs: Vec<(String, JobKind, Summary)>,
}

impl SuiteReport {
    pub fn render(&self) -> String {
        let mut s = String::new();
        for (name, kind, summary) in &self.jobs {
            s.push_str(&format!("[{name}]\nkind = {kind}\n{}\n", render(summary)));
        }
        s
    }
}

/// Runs every job in dependency order, writing `<out_root>/<job>/…` and
/// `<out_root>/summary.txt`. The first failing job aborts the suite.
pub fn run_experiment_suite(manifest: &Manifest, out_root: &Path) -> Result<SuiteReport> {
    let order = manifest.order()?;
    let resolver = SuiteResolver { manifest, out_root };
    let names: Vec<&str> = manifest.jobs.iter().map(|j| j.name.as_str()).collect();
    // every reference must be a job or an existing file before anything runs
    for &i in &order {
        let job = &manifest.jobs[i];
        for (r, want) in Manifest::references(job) {
            let fail = |reason: String| Error::Job {
                job: job.name.clone(),
                reason,
            };
            if names.contains(&r.as_str()) {
                resolver.resolve(&r, want).map_err(|e| fail(e.to_string()))?;
            } else if !manifest.root.join(&r).exists() {
                return Err(fail(format!("missing {} {r:?}", want.file_name())));
            }
        }
    }
    std::fs::create_dir_all(out_root)?;
    let mut report = SuiteReport::default();
    write_atomic(&out_root.join("summary.txt"), b"")?;
    for &i in &order {
        let job = &manifest.jobs[i];
        let fail = |e: Error| Error::Job {
            job: job.name.clone(),
            reason: e.to_string(),
        };
        let params = Params::new(&job.name, job.table.clone()).map_err(fail)?;
        let ctx = JobContext {
            out_dir: out_root.join(&job.name),
            resolver: &resolver,
        };
        let summary = run_job(job.kind, &params, &ctx).map_err(fail)?;
        report.jobs.push((job.name.clone(), job.kind, summary));
        write_atomic(&out_root.join("summary.txt"), report.render().as_bytes())?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ordering_follows_references() {
        let m = Manifest::parse(
            r#"
            [[job]]
            name = "e"
            kind = "eval"
            base = "b"
            [[job]]
            name = "b"
            kind = "train_base"
            corpus = "d"
            [[job]]
            name = "d"
            kind = "gen_data"
            "#,
            Path::new("."),
        )
        .unwrap();
        let order: Vec<&str> = m.order().unwrap().into_iter().map(|i| m.jobs[i].name.as_str()).collect();
        assert_eq!(order, ["d", "b", "e"]);
    }

    #[test]
    fn cycles_and_bad_entries() {
        let cyc = r#"
            [[job]]
            name = "a"
            kind = "similarity"
            runs = ["b"]
            [[job]]
            name = "b"
            kind = "train_brep"
            base = "a"
        "#;
        assert!(Manifest::parse(cyc, Path::new(".")).unwrap().order().is_err());
        assert!(Manifest::parse("[[job]]\nname = \"a\"\nkind = \"nope\"", Path::new(".")).is_err());
        assert!(Manifest::parse("[[job]]\nname = \"a b\"\nkind = \"eval\"", Path::new(".")).is_err());
        assert!(Manifest::parse("x = 1", Path::new(".")).is_err());
        let dup = "[[job]]\nname = \"a\"\nkind = \"eval\"\n[[job]]\nname = \"a\"\nkind = \"eval\"";
        assert!(Manifest::parse(dup, Path::new(".")).is_err());
    }
}
