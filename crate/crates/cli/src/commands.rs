//! The `couq` subcommands.
//!
//! Run directory layout:
//!
//! ```text
//! out/
//!   MANIFEST.json                     status, runs, timestamps
//!   config.toml                       effective configuration
//!   report_<method>_seed<s>.json      one RunReport per run
//!   summary.csv, plot_data.csv
//!   tasks/<method>_seed<s>_task<t>.json        TaskResult (engine methods)
//!   predictions/<method>_seed<s>_task<t>.csv   id,predicted_class,softmax_max,entropy,margin
//!   checkpoints/<method>_seed<s>_task<t>.ck
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use couq_core::checkpoint;
use couq_core::evalkit::{emit_report, load_reports, write_atomic, RunReport};
use couq_core::featstore::{gen_synthetic, load_features, save_features, FileFormat};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Method};
use crate::runner::{load_dataset, prepare, run_method, Prepared, TaskArtifacts};
use crate::CliError;

pub const MANIFEST_FILE: &str = "MANIFEST.json";
pub const EVAL_FILE: &str = "eval.csv";

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Write the configured synthetic dataset (first seed unless given).
pub fn gen_synthetic_cmd(cfg: &ExperimentConfig, seed: Option<u64>, out: &Path) -> Result<PathBuf, CliError> {
    let spec = cfg
        .dataset
        .synthetic
        .as_ref()
        .ok_or_else(|| CliError::Config("gen-synthetic needs a [dataset.synthetic] section".into()))?;
    let seed = seed.unwrap_or(cfg.seeds[0]);
    let fs = gen_synthetic(spec, seed)?;
    save_features(&fs, out, FileFormat::from_path(out)).map_err(runtime)?;
    Ok(out.to_path_buf())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub method: String,
    pub seed: u64,
    pub status: String,
    pub tasks_completed: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// `running`, `complete` or `partial`.
    pub status: String,
    pub started: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished: Option<String>,
    pub methods: Vec<String>,
    pub seeds: Vec<u64>,
    pub runs: Vec<RunEntry>,
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(runtime)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes).map_err(runtime)
}

fn artifact_name(method: Method, seed: u64, task: usize) -> String {
    format!("{method}_seed{seed}_task{task}")
}

fn write_artifacts(cfg: &ExperimentConfig, out: &Path, a: TaskArtifacts) -> Result<(), CliError> {
    let name = artifact_name(a.method, a.seed, a.task);
    if cfg.output.task_artifacts {
        if let Some(result) = &a.result {
            write_json(&out.join("tasks").join(format!("{name}.json")), result)?;
        }
        let mut csv = String::from("id,predicted_class,softmax_max,entropy,margin\n");
        for r in &a.predictions {
            csv.push_str(&format!(
                "{},{},{},{},{}\n",
                r.id, r.predicted, r.scores.softmax_max, r.scores.entropy, r.scores.margin
            ));
        }
        write_atomic(&out.join("predictions").join(format!("{name}.csv")), csv.as_bytes()).map_err(runtime)?;
    }
    if cfg.output.checkpoints {
        checkpoint::save(&a.checkpoint, &out.join("checkpoints").join(format!("{name}.ck"))).map_err(runtime)?;
    }
    Ok(())
}

/// Run every configured (method, seed) pair and write the run directory.
/// A failing run does not stop the others; the manifest then reads
/// `partial` and the command fails with a runtime error.
pub fn run_cmd(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<RunReport>, CliError> {
    std::fs::create_dir_all(out).map_err(|e| CliError::Runtime(format!("{}: {e}", out.display())))?;
    let mut manifest = Manifest {
        status: "running".into(),
        started: now(),
        finished: None,
        methods: cfg.methods.iter().map(|m| m.tag().to_string()).collect(),
        seeds: cfg.seeds.clone(),
        runs: Vec::new(),
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    let cfg_text = toml::to_string(cfg).map_err(runtime)?;
    write_atomic(&out.join("config.toml"), cfg_text.as_bytes()).map_err(runtime)?;

    let prepared: Vec<Prepared> = cfg
        .seeds
        .par_iter()
        .map(|s| prepare(cfg, load_dataset(cfg, *s)?, *s))
        .collect::<Result<_, CliError>>()?;

    let jobs: Vec<(Method, &Prepared)> = cfg
        .methods
        .iter()
        .flat_map(|m| prepared.iter().map(move |p| (*m, p)))
        .collect();
    let finished: Vec<(RunEntry, Option<RunReport>)> = jobs
        .par_iter()
        .map(|(method, p)| {
            let mut tasks_completed = 0usize;
            let result = run_method(cfg, p, *method, &mut |a| {
                write_artifacts(cfg, out, a)?;
                tasks_completed += 1;
                Ok(())
            });
            match result {
                Ok(report) => (
                    RunEntry {
                        method: method.tag().into(),
                        seed: p.seed,
                        status: "complete".into(),
                        tasks_completed,
                        error: None,
                    },
                    Some(report),
                ),
                Err(e) => {
                    log::error!("{method} seed {}: {e}", p.seed);
                    (
                        RunEntry {
                            method: method.tag().into(),
                            seed: p.seed,
                            status: "failed".into(),
                            tasks_completed,
                            error: Some(e.to_string()),
                        },
                        None,
                    )
                }
            }
        })
        .collect();

    let reports: Vec<RunReport> = finished.iter().filter_map(|(_, r)| r.clone()).collect();
    let failed = finished.iter().filter(|(_, r)| r.is_none()).count();
    manifest.runs = finished.into_iter().map(|(e, _)| e).collect();
    if !reports.is_empty() {
        emit_report(&reports, out).map_err(runtime)?;
    }
    manifest.status = if failed == 0 { "complete" } else { "partial" }.into();
    manifest.finished = Some(now());
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    if failed > 0 {
        return Err(CliError::Runtime(format!(
            "{failed} of {} runs failed; see {}",
            jobs.len(),
            out.join(MANIFEST_FILE).display()
        )));
    }
    Ok(reports)
}

/// Per-method aggregate over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub runs: usize,
    pub mean_auroc: f64,
    pub median_auroc: f64,
    pub mean_accuracy: f64,
    pub median_accuracy: f64,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        f64::NAN
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Accuracy of a run is its final cumulative accuracy.
pub fn summarize(reports: &[RunReport]) -> Vec<MethodSummary> {
    let mut by_method: BTreeMap<&str, Vec<&RunReport>> = BTreeMap::new();
    for r in reports {
        by_method.entry(&r.method).or_default().push(r);
    }
    by_method
        .into_iter()
        .map(|(method, runs)| {
            let aurocs: Vec<f64> = runs.iter().map(|r| r.mean_auroc).collect();
            let accs: Vec<f64> = runs.iter().map(|r| r.mean_accuracy).collect();
            MethodSummary {
                method: method.to_string(),
                runs: runs.len(),
                mean_auroc: mean(&aurocs),
                median_auroc: median(&aurocs),
                mean_accuracy: mean(&accs),
                median_accuracy: median(&accs),
            }
        })
        .collect()
}

pub fn format_table(rows: &[MethodSummary]) -> String {
    let mut s = format!(
        "{:<18} {:>4} {:>10} {:>10} {:>10} {:>10}\n",
        "method", "runs", "auroc", "auroc_med", "acc", "acc_med"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<18} {:>4} {:>10.4} {:>10.4} {:>10.4} {:>10.4}\n",
            r.method, r.runs, r.mean_auroc, r.median_auroc, r.mean_accuracy, r.median_accuracy
        ));
    }
    s
}

/// Aggregate the reports of a run directory; writes `eval.csv` there.
pub fn eval_cmd(run_dir: &Path) -> Result<Vec<MethodSummary>, CliError> {
    let reports = load_reports(run_dir).map_err(|e| CliError::Data(e.to_string()))?;
    let rows = summarize(&reports);
    let mut csv = String::from("method,runs,mean_auroc,median_auroc,mean_accuracy,median_accuracy\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.method, r.runs, r.mean_auroc, r.median_auroc, r.mean_accuracy, r.median_accuracy
        ));
    }
    write_atomic(&run_dir.join(EVAL_FILE), csv.as_bytes()).map_err(runtime)?;
    Ok(rows)
}

/// Score every record of a feature file against a checkpoint. Output
/// columns: `id,numerator,score,predicted_class` (the last empty when the
/// checkpoint holds no classifier).
pub fn score_cmd(checkpoint_path: &Path, features: &Path, out: &Path) -> Result<usize, CliError> {
    let ck = checkpoint::load(checkpoint_path).map_err(|e| CliError::Data(e.to_string()))?;
    if ck.scorer.old.is_empty() {
        return Err(CliError::Data(format!("{}: checkpoint has no subspaces", checkpoint_path.display())));
    }
    let fs = load_features(features, FileFormat::from_path(features)).map_err(|e| CliError::Data(e.to_string()))?;
    let rows = fs
        .records()
        .par_iter()
        .map(|r| {
            let numerator = ck.scorer.numerator(&r.vector)?;
            let score = ck.scorer.score(&r.vector)?;
            let predicted = match &ck.classifier {
                Some(c) if c.net.is_some() => c.predict(&r.vector)?.to_string(),
                _ => String::new(),
            };
            Ok(format!("{},{numerator},{score},{predicted}\n", r.id))
        })
        .collect::<couq_core::Result<Vec<String>>>()?;
    let mut csv = String::from("id,numerator,score,predicted_class\n");
    csv.extend(rows);
    write_atomic(out, csv.as_bytes()).map_err(runtime)?;
    Ok(fs.len())
}
