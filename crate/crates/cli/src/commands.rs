use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use chrono::Utc;
use rayon::prelude::*;

use dualhsic::checkpoint::{buffer_to_text, write_atomic, Checkpoint};
use dualhsic::config::{split_override, ExperimentConfig};
use dualhsic::data::{read_csv_samples, write_csv_rows};
use dualhsic::network::forward;
use dualhsic::results::{summarize, write_results, ResultsSummary, RunManifest};
use dualhsic::trainer::{load_stream, probe_lambda_ha_sign, run_on_stream, RunResult};

use crate::{Common, OUTPUT_DIR_ENV};

/// 3 for divergence, 1 for I/O failures, 2 for every other library error
/// (configs, formats, shapes) and 1 for anything else.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<dualhsic::Error>() {
        Some(dualhsic::Error::Divergence(_)) => 3,
        Some(dualhsic::Error::Io(_)) => 1,
        Some(_) => 2,
        None => 1,
    }
}

fn load_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_path(path)?;
    for o in overrides {
        let (k, v) = split_override(o)?;
        cfg = cfg.with_override(k, v)?;
    }
    Ok(cfg)
}

fn output_dir(common: &Common) -> Result<PathBuf> {
    let dir = common
        .out
        .clone()
        .or_else(|| std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("results"));
    std::fs::create_dir_all(&dir)
        .map_err(dualhsic::Error::from)
        .with_context(|| format!("creating output directory {}", dir.display()))?;
    Ok(dir)
}

fn file_safe(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "._-".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn now() -> String {
    Utc::now().to_rfc3339()
}

struct SeedRun {
    result: RunResult,
    checkpoint: Checkpoint,
    buffer_dump: String,
}

fn run_seeds(cfg: &ExperimentConfig) -> Result<Vec<SeedRun>> {
    cfg.validate()?;
    let runs: dualhsic::Result<Vec<SeedRun>> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let stream = load_stream(cfg, seed)?;
            let (result, state) = run_on_stream(cfg, &stream, seed)?;
            Ok(SeedRun {
                result,
                checkpoint: Checkpoint {
                    model: state.model,
                    classes_per_task: stream.classes_per_task,
                    normalization: stream.normalization.clone(),
                },
                buffer_dump: buffer_to_text(&state.buffer),
            })
        })
        .collect();
    Ok(runs?)
}

fn print_summary(label: &str, s: &ResultsSummary) {
    let fgt = match (s.mean_forgetting, s.std_forgetting) {
        (Some(m), Some(sd)) => format!("{m:.4} ± {sd:.4}"),
        _ => "n/a".into(),
    };
    println!(
        "{label}: A_T {:.4} ± {:.4}, F_T {fgt} over {} seed(s)",
        s.mean_average_accuracy,
        s.std_average_accuracy,
        s.per_seed.len()
    );
}

/// Runs every seed and writes `<name>.jsonl` plus optional per-seed
/// checkpoints; returns the results path and summary.
fn execute(
    cfg: &ExperimentConfig,
    dir: &Path,
    stem: &str,
    checkpoints: bool,
) -> Result<(PathBuf, ResultsSummary)> {
    let started = now();
    let runs = run_seeds(cfg)?;
    let mut manifest = RunManifest::new(cfg, started, String::new());
    if checkpoints {
        for r in &runs {
            let base = format!("{stem}.seed{}", r.result.seed);
            let ckpt = dir.join(format!("{base}.ckpt"));
            r.checkpoint.save(&ckpt)?;
            let buf = dir.join(format!("{base}.buffer"));
            write_atomic(&buf, r.buffer_dump.as_bytes())?;
            manifest.outputs.push(ckpt.display().to_string());
            manifest.outputs.push(buf.display().to_string());
        }
    }
    manifest.finished_at = now();
    let results: Vec<RunResult> = runs.into_iter().map(|r| r.result).collect();
    let path = dir.join(format!("{stem}.jsonl"));
    write_results(&path, &manifest, &results)?;
    Ok((path, summarize(&results)))
}

pub fn run(config: &Path, seed: Option<u64>, checkpoints: bool, common: &Common) -> Result<()> {
    let mut cfg = load_config(config, &common.overrides)?;
    if let Some(s) = seed {
        cfg.seeds = vec![s];
    }
    cfg.validate()?;
    let dir = output_dir(common)?;
    let (path, summary) = execute(&cfg, &dir, &file_safe(&cfg.name), checkpoints)?;
    print_summary(&cfg.name, &summary);
    println!("results: {}", path.display());
    Ok(())
}

/// Splits `a,b,[1,2]` at top-level commas.
pub fn split_values(raw: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut cur = String::new();
    for c in raw.chars() {
        match c {
            '[' => depth += 1,
            ']' => depth -= 1,
            ',' if depth == 0 => {
                out.push(std::mem::take(&mut cur));
                continue;
            }
            _ => {}
        }
        cur.push(c);
    }
    out.push(cur);
    out.into_iter()
        .map(|v| v.trim().to_string())
        .filter(|v| !v.is_empty())
        .collect()
}

pub fn sweep(config: &Path, axis: &str, values: &str, common: &Common) -> Result<()> {
    let base = load_config(config, &common.overrides)?;
    let values = split_values(values);
    if values.is_empty() {
        return Err(dualhsic::Error::Config("--values is empty".into()).into());
    }
    // reject bad keys or values before any training starts
    let configs = values
        .iter()
        .map(|v| {
            let c = base
                .with_override(axis, v)
                .with_context(|| format!("{axis}={v}"))?;
            c.validate().with_context(|| format!("{axis}={v}"))?;
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;

    let dir = output_dir(common)?;
    let stem = file_safe(&base.name);
    let table_path = dir.join(format!("{stem}.sweep-{}.csv", file_safe(axis)));
    let mut table = csv::Writer::from_writer(Vec::new());
    table.write_record([
        axis,
        "mean_average_accuracy",
        "std_average_accuracy",
        "mean_forgetting",
        "std_forgetting",
        "results_file",
    ])?;
    let mut best: Option<(f64, &str)> = None;
    for (v, cfg) in values.iter().zip(&configs) {
        let point = format!("{stem}.{}-{}", file_safe(axis), file_safe(v));
        let (path, s) = execute(cfg, &dir, &point, false)?;
        print_summary(&format!("{axis}={v}"), &s);
        let opt = |x: Option<f64>| x.map(|f| f.to_string()).unwrap_or_default();
        table.write_record([
            v.clone(),
            s.mean_average_accuracy.to_string(),
            s.std_average_accuracy.to_string(),
            opt(s.mean_forgetting),
            opt(s.std_forgetting),
            path.display().to_string(),
        ])?;
        if best.is_none_or(|(a, _)| s.mean_average_accuracy > a) {
            best = Some((s.mean_average_accuracy, v));
        }
    }
    let bytes = table.into_inner().context("flushing sweep table")?;
    write_atomic(&table_path, &bytes)?;
    if let Some((a, v)) = best {
        println!("best {axis}={v} (mean A_T {a:.4})");
    }
    println!("summary: {}", table_path.display());
    Ok(())
}

pub fn sign_probe(config: &Path, common: &Common) -> Result<()> {
    let cfg = load_config(config, &common.overrides)?;
    cfg.validate()?;
    let started = now();
    let probe = probe_lambda_ha_sign(&cfg)?;
    let mut chosen = cfg.clone();
    chosen.dualhsic.lambda_ha = probe.better_lambda_ha();
    let mut manifest = RunManifest::new(&chosen, started, now());
    manifest
        .annotations
        .insert("lambda_ha_sign_probe".into(), probe.to_json());
    let dir = output_dir(common)?;
    let path = dir.join(format!("{}.sign-probe.jsonl", file_safe(&cfg.name)));
    write_results(&path, &manifest, probe.better_runs())?;
    print_summary(
        &format!("lambda_ha={}", -probe.magnitude),
        &summarize(&probe.negative),
    );
    print_summary(
        &format!("lambda_ha={}", probe.magnitude),
        &summarize(&probe.positive),
    );
    println!("better lambda_ha: {}", probe.better_lambda_ha());
    println!("results: {}", path.display());
    Ok(())
}

pub fn export_embeddings(checkpoint: &Path, data: &Path, out: &Path) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let (x, labels) = read_csv_samples(data)?;
    let spec = ck.spec();
    if x.cols() != spec.input_dim {
        return Err(dualhsic::Error::shape(
            "export-embeddings",
            format!(
                "dataset has {} features but the checkpoint expects {}",
                x.cols(),
                spec.input_dim
            ),
        )
        .into());
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= spec.num_classes) {
        bail!(dualhsic::Error::InvalidLabel {
            label: bad,
            classes: spec.num_classes
        });
    }
    let x = match &ck.normalization {
        Some(n) => n.apply(&x)?,
        None => x,
    };
    let trace = forward(&ck.model.net, &x)?;
    let task_ids: Vec<usize> = labels
        .iter()
        .map(|y| y / ck.classes_per_task.max(1))
        .collect();
    write_csv_rows(out, "z", trace.last_hidden(), &labels, &task_ids)?;
    println!("wrote {} rows to {}", labels.len(), out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn value_splitting() {
        assert_eq!(split_values("20, 50,100"), vec!["20", "50", "100"]);
        assert_eq!(split_values("[1,2],[1], all"), vec!["[1,2]", "[1]", "all"]);
        assert!(split_values(" , ").is_empty());
    }

    #[test]
    fn file_names_are_sanitized() {
        assert_eq!(
            file_safe("dualhsic.hbr_layers-[1,2]"),
            "dualhsic.hbr_layers-_1_2_"
        );
    }

    #[test]
    fn exit_codes() {
        let div: anyhow::Error = dualhsic::Error::Divergence("x".into()).into();
        assert_eq!(exit_code(&div), 3);
        let cfg: anyhow::Error = dualhsic::Error::Config("x".into()).into();
        assert_eq!(exit_code(&cfg.context("while loading")), 2);
        assert_eq!(exit_code(&anyhow::anyhow!("other")), 1);
    }
}
