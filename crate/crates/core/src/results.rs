//! Line-delimited JSON results files.
//!
//! A file holds one `manifest` record, one `task` record per seed and task,
//! and a closing `summary` record. Every number is written in shortest
//! round-trip form, so metrics recomputed from the stored accuracy rows must
//! match the stored summary exactly; [`ResultsFile::validate`] checks this.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::metrics::{average_accuracy, forgetting, AccuracyMatrix};
use crate::trainer::{EpochSummary, PhaseTiming, RunResult};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: u32,
    pub artifact_version: String,
    pub name: String,
    pub config: ExperimentConfig,
    pub seeds: Vec<u64>,
    /// Other files this run produced.
    pub outputs: Vec<String>,
    pub started_at: String,
    pub finished_at: String,
    /// Free-form findings attached to the run.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub annotations: BTreeMap<String, serde_json::Value>,
}

impl RunManifest {
    pub fn new(config: &ExperimentConfig, started_at: String, finished_at: String) -> Self {
        Self {
            format: FORMAT_VERSION,
            artifact_version: env!("CARGO_PKG_VERSION").to_string(),
            name: config.name.clone(),
            config: config.clone(),
            seeds: config.seeds.clone(),
            outputs: Vec::new(),
            started_at,
            finished_at,
            annotations: BTreeMap::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub seed: u64,
    /// 1-based task number.
    pub task: usize,
    pub accuracy_row: Vec<f64>,
    pub epochs: Vec<EpochSummary>,
    pub wall_clock: PhaseTiming,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub average_accuracy: f64,
    pub forgetting: Option<f64>,
}

/// Per-seed final metrics with their mean and sample standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultsSummary {
    pub per_seed: Vec<SeedSummary>,
    pub mean_average_accuracy: f64,
    pub std_average_accuracy: f64,
    pub mean_forgetting: Option<f64>,
    pub std_forgetting: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum Record {
    Manifest(Box<RunManifest>),
    Task(TaskRecord),
    Summary(ResultsSummary),
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn summary_of(per_seed: Vec<SeedSummary>) -> ResultsSummary {
    let acc: Vec<f64> = per_seed.iter().map(|s| s.average_accuracy).collect();
    let (mean_average_accuracy, std_average_accuracy) = mean_std(&acc);
    let fgt: Option<Vec<f64>> = per_seed.iter().map(|s| s.forgetting).collect();
    let (mean_forgetting, std_forgetting) = match fgt {
        Some(f) if !f.is_empty() => {
            let (m, s) = mean_std(&f);
            (Some(m), Some(s))
        }
        _ => (None, None),
    };
    ResultsSummary {
        per_seed,
        mean_average_accuracy,
        std_average_accuracy,
        mean_forgetting,
        std_forgetting,
    }
}

pub fn summarize(results: &[RunResult]) -> ResultsSummary {
    summary_of(
        results
            .iter()
            .map(|r| SeedSummary {
                seed: r.seed,
                average_accuracy: r.final_average_accuracy,
                forgetting: r.final_forgetting,
            })
            .collect(),
    )
}

fn line<S: Serialize>(out: &mut String, rec: &S) -> Result<()> {
    let s = serde_json::to_string(rec).map_err(|e| Error::format("results", e.to_string()))?;
    out.push_str(&s);
    out.push('\n');
    Ok(())
}

pub fn to_jsonl(manifest: &RunManifest, results: &[RunResult]) -> Result<String> {
    let mut out = String::new();
    line(&mut out, &Record::Manifest(Box::new(manifest.clone())))?;
    for r in results {
        for (t, row) in r.accuracy.rows().iter().enumerate() {
            let epochs = r
                .epochs
                .iter()
                .filter(|e| e.task == t)
                .cloned()
                .collect::<Vec<_>>();
            line(
                &mut out,
                &Record::Task(TaskRecord {
                    seed: r.seed,
                    task: t + 1,
                    accuracy_row: row.clone(),
                    epochs,
                    wall_clock: r.timings.get(t).copied().unwrap_or_default(),
                }),
            )?;
        }
    }
    line(&mut out, &Record::Summary(summarize(results)))?;
    Ok(out)
}

/// Writes a results file atomically.
pub fn write_results(path: &Path, manifest: &RunManifest, results: &[RunResult]) -> Result<()> {
    write_atomic(path, to_jsonl(manifest, results)?.as_bytes())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResultsFile {
    pub manifest: RunManifest,
    pub tasks: Vec<TaskRecord>,
    pub summary: ResultsSummary,
}

impl ResultsFile {
    pub fn parse(text: &str) -> Result<Self> {
        let bad = |d: String| Error::format("results file", d);
        let mut manifest = None;
        let mut tasks = Vec::new();
        let mut summary = None;
        for (i, l) in text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
        {
            let rec: Record =
                serde_json::from_str(l).map_err(|e| bad(format!("line {}: {e}", i + 1)))?;
            match rec {
                Record::Manifest(m) if i == 0 => manifest = Some(*m),
                Record::Manifest(_) => {
                    return Err(bad(format!("line {}: manifest must come first", i + 1)))
                }
                _ if manifest.is_none() => return Err(bad("manifest must come first".into())),
                _ if summary.is_some() => return Err(bad("records after the summary".into())),
                Record::Task(t) => tasks.push(t),
                Record::Summary(s) => summary = Some(s),
            }
        }
        Ok(Self {
            manifest: manifest.ok_or_else(|| bad("no manifest".into()))?,
            tasks,
            summary: summary.ok_or_else(|| bad("no summary record".into()))?,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Rebuilds each seed's accuracy matrix from its task records.
    pub fn accuracy_matrices(&self) -> Result<Vec<(u64, AccuracyMatrix)>> {
        let num_tasks = self.manifest.config.data.num_tasks;
        let mut out: Vec<(u64, AccuracyMatrix)> = Vec::new();
        for rec in &self.tasks {
            if out
                .last()
                .is_none_or(|(s, m)| *s != rec.seed || m.completed() == num_tasks)
            {
                out.push((rec.seed, AccuracyMatrix::new(num_tasks)));
            }
            let (_, m) = out.last_mut().expect("pushed above");
            if rec.task != m.completed() + 1 {
                return Err(Error::format(
                    "results file",
                    format!("seed {} task {} out of order", rec.seed, rec.task),
                ));
            }
            m.push_row(rec.accuracy_row.clone())?;
        }
        Ok(out)
    }

    /// Recomputes every stored metric from the accuracy rows and requires an
    /// exact match.
    pub fn validate(&self) -> Result<()> {
        let bad = |d: String| Error::format("results file", d);
        let mats = self.accuracy_matrices()?;
        let seeds: Vec<u64> = mats.iter().map(|(s, _)| *s).collect();
        if seeds != self.manifest.seeds {
            return Err(bad(format!(
                "seeds {seeds:?} differ from manifest {:?}",
                self.manifest.seeds
            )));
        }
        let mut per_seed = Vec::with_capacity(mats.len());
        for (seed, m) in &mats {
            let t = m.num_tasks();
            if m.completed() != t {
                return Err(bad(format!(
                    "seed {seed} has {} of {t} tasks",
                    m.completed()
                )));
            }
            per_seed.push(SeedSummary {
                seed: *seed,
                average_accuracy: average_accuracy(m, t)?,
                forgetting: if t >= 2 {
                    Some(forgetting(m, t)?)
                } else {
                    None
                },
            });
        }
        let recomputed = summary_of(per_seed);
        if !same_bits(&recomputed, &self.summary) {
            return Err(bad(format!(
                "stored summary {:?} does not match recomputed {:?}",
                self.summary, recomputed
            )));
        }
        Ok(())
    }
}

fn same_bits(a: &ResultsSummary, b: &ResultsSummary) -> bool {
    let opt = |x: Option<f64>| x.map(f64::to_bits);
    a.per_seed.len() == b.per_seed.len()
        && a.per_seed.iter().zip(&b.per_seed).all(|(x, y)| {
            x.seed == y.seed
                && x.average_accuracy.to_bits() == y.average_accuracy.to_bits()
                && opt(x.forgetting) == opt(y.forgetting)
        })
        && a.mean_average_accuracy.to_bits() == b.mean_average_accuracy.to_bits()
        && a.std_average_accuracy.to_bits() == b.std_average_accuracy.to_bits()
        && opt(a.mean_forgetting) == opt(b.mean_forgetting)
        && opt(a.std_forgetting) == opt(b.std_forgetting)
}
