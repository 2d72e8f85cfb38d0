//! Metrics and report files.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{ClassId, RecordId};

/// Area under the ROC curve for `labels` (true = novel) via the
/// Mann–Whitney statistic with average ranks for ties.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::dim(labels.len(), scores.len()));
    }
    let n_pos = labels.iter().filter(|l| **l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("AUROC needs both positive and negative labels".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::UndefinedMetric("NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|a, b| scores[*a].total_cmp(&scores[*b]));
    // ranks are 1-based; a tie block [i, j) shares the mean rank
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let mean_rank = (i + 1 + j) as f64 / 2.0;
        let pos_in_block = order[i..j].iter().filter(|k| labels[**k]).count();
        rank_sum_pos += mean_rank * pos_in_block as f64;
        i = j;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Maximum-weight assignment of rows to columns (each used at most once).
/// Returns `assignment[row] = Some(col)`.
pub fn max_weight_matching(weights: &[Vec<f64>]) -> Vec<Option<usize>> {
    let rows = weights.len();
    if rows == 0 {
        return Vec::new();
    }
    let cols = weights[0].len();
    let n = rows.max(cols);
    let max_w = weights.iter().flatten().copied().fold(0.0f64, f64::max);
    // square cost matrix, minimization form; padding costs max_w (weight 0)
    let cost = |i: usize, j: usize| -> f64 {
        if i < rows && j < cols {
            max_w - weights[i][j]
        } else {
            max_w
        }
    };
    // Kuhn–Munkres with potentials, 1-based indexing
    let inf = f64::INFINITY;
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![None; rows];
    for j in 1..=n {
        let i = p[j];
        if i >= 1 && i <= rows && j <= cols {
            out[i - 1] = Some(j - 1);
        }
    }
    out
}

/// Align discovered class ids with true class ids by maximizing the
/// number of agreeing `(predicted, truth)` pairs. Pairs whose prediction is
/// not in `discovered` are ignored; so are true classes in `known_true`.
pub fn match_discovered(
    pairs: &[(ClassId, ClassId)],
    discovered: &BTreeSet<ClassId>,
    known_true: &BTreeSet<ClassId>,
) -> BTreeMap<ClassId, ClassId> {
    let relevant: Vec<(ClassId, ClassId)> = pairs
        .iter()
        .copied()
        .filter(|(p, t)| discovered.contains(p) && !known_true.contains(t))
        .collect();
    let rows: Vec<ClassId> = discovered.iter().copied().collect();
    let cols: Vec<ClassId> = relevant.iter().map(|(_, t)| *t).collect::<BTreeSet<_>>().into_iter().collect();
    if rows.is_empty() || cols.is_empty() {
        return BTreeMap::new();
    }
    let mut w = vec![vec![0.0f64; cols.len()]; rows.len()];
    for (p, t) in &relevant {
        let r = rows.binary_search(p).unwrap();
        let c = cols.binary_search(t).unwrap();
        w[r][c] += 1.0;
    }
    max_weight_matching(&w)
        .into_iter()
        .enumerate()
        .filter_map(|(r, c)| c.filter(|c| w[r][*c] > 0.0).map(|c| (rows[r], cols[c])))
        .collect()
}

/// Test predictions for one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskPredictions {
    pub test_ids: Vec<RecordId>,
    pub predictions: HashMap<RecordId, ClassId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracySummary {
    pub per_task: Vec<f64>,
    /// Mean of `per_task[..=t]` for every t.
    pub cumulative: Vec<f64>,
}

pub fn continual_accuracy(tasks: &[TaskPredictions], truth: &HashMap<RecordId, ClassId>) -> Result<AccuracySummary> {
    let mut per_task = Vec::with_capacity(tasks.len());
    for t in tasks {
        if t.test_ids.is_empty() {
            return Err(Error::Eval("task with an empty test pool".into()));
        }
        let mut correct = 0usize;
        for id in &t.test_ids {
            let p = t
                .predictions
                .get(id)
                .ok_or_else(|| Error::Eval(format!("no prediction for record {id}")))?;
            let y = truth
                .get(id)
                .ok_or_else(|| Error::Eval(format!("no ground truth for record {id}")))?;
            if p == y {
                correct += 1;
            }
        }
        per_task.push(correct as f64 / t.test_ids.len() as f64);
    }
    let cumulative = (1..=per_task.len())
        .map(|k| per_task[..k].iter().sum::<f64>() / k as f64)
        .collect();
    Ok(AccuracySummary { per_task, cumulative })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task: usize,
    /// Absent for task 0, which has no novelty decision.
    pub auroc: Option<f64>,
    pub test_accuracy: f64,
    pub cumulative_accuracy: f64,
    pub label_spend: usize,
    pub iterations: usize,
    pub novel_detected: usize,
    pub novel_true: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: String,
    pub seed: u64,
    pub budget_fraction: f64,
    pub tasks: Vec<TaskRecord>,
    /// Mean AUROC over tasks 1.. .
    pub mean_auroc: f64,
    /// Mean of all per-task test accuracies (the final cumulative value).
    pub mean_accuracy: f64,
}

impl RunReport {
    pub fn new(method: &str, seed: u64, budget_fraction: f64, tasks: Vec<TaskRecord>) -> Self {
        let aurocs: Vec<f64> = tasks.iter().filter_map(|t| t.auroc).collect();
        let mean = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
        let accs: Vec<f64> = tasks.iter().map(|t| t.test_accuracy).collect();
        Self {
            method: method.to_string(),
            seed,
            budget_fraction,
            mean_auroc: mean(&aurocs),
            mean_accuracy: mean(&accs),
            tasks,
        }
    }

    pub fn file_name(&self) -> String {
        format!("report_{}_seed{}.json", self.method, self.seed)
    }
}

/// Write `bytes` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub const SUMMARY_FILE: &str = "summary.csv";
pub const PLOT_FILE: &str = "plot_data.csv";

/// Per-run JSON, the method × seed × task summary and the plot-data CSV.
pub fn emit_report(reports: &[RunReport], out_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let mut sorted: Vec<&RunReport> = reports.iter().collect();
    sorted.sort_by(|a, b| a.method.cmp(&b.method).then(a.seed.cmp(&b.seed)));
    for r in &sorted {
        let path = out_dir.join(r.file_name());
        let mut json = serde_json::to_vec_pretty(r)?;
        json.push(b'\n');
        write_atomic(&path, &json)?;
        written.push(path);
    }

    let mut summary = csv::Writer::from_writer(Vec::new());
    summary.write_record([
        "method",
        "seed",
        "task",
        "auroc",
        "test_accuracy",
        "cumulative_accuracy",
        "label_spend",
        "iterations",
        "novel_detected",
        "novel_true",
    ])?;
    let mut plot = csv::Writer::from_writer(Vec::new());
    plot.write_record(["method", "seed", "task", "budget", "metric_name", "value"])?;
    for r in &sorted {
        for t in &r.tasks {
            summary.write_record([
                r.method.clone(),
                r.seed.to_string(),
                t.task.to_string(),
                fmt_opt(t.auroc),
                t.test_accuracy.to_string(),
                t.cumulative_accuracy.to_string(),
                t.label_spend.to_string(),
                t.iterations.to_string(),
                t.novel_detected.to_string(),
                t.novel_true.to_string(),
            ])?;
            let mut metrics = vec![("accuracy", Some(t.cumulative_accuracy))];
            metrics.insert(0, ("auroc", t.auroc));
            for (name, value) in metrics {
                if let Some(v) = value {
                    plot.write_record([
                        r.method.clone(),
                        r.seed.to_string(),
                        t.task.to_string(),
                        r.budget_fraction.to_string(),
                        name.to_string(),
                        v.to_string(),
                    ])?;
                }
            }
        }
    }
    for (name, w) in [(SUMMARY_FILE, summary), (PLOT_FILE, plot)] {
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        let path = out_dir.join(name);
        write_atomic(&path, &bytes)?;
        written.push(path);
    }
    Ok(written)
}

/// Load every `report_*.json` in `dir`, sorted by file name.
pub fn load_reports(dir: &Path) -> Result<Vec<RunReport>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("report_") && n.ends_with(".json"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Eval(format!("no reports in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| {
            let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("{}: {e}", p.display())))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::Rng;

    pub(crate) fn auroc_pairs(scores: &[f64], labels: &[bool]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, si) in scores.iter().enumerate() {
            for (j, sj) in scores.iter().enumerate() {
                if labels[i] && !labels[j] {
                    den += 1.0;
                    if si > sj {
                        num += 1.0;
                    } else if si == sj {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.5, 0.5], &[true, false]).unwrap(), 0.5);
        assert!(matches!(auroc(&[1.0, 2.0], &[true, true]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn auroc_matches_pair_counting() {
        let mut rng = seeds::rng(99);
        for _ in 0..200 {
            let n = rng.random_range(2..120);
            let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
            labels[0] = true;
            labels[1] = false;
            // coarse grid to force ties
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..15) as f64 / 3.0).collect();
            let a = auroc(&scores, &labels).unwrap();
            assert!((a - auroc_pairs(&scores, &labels)).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn auroc_symmetries(v in prop::collection::vec((0.0f64..10.0, any::<bool>()), 2..80)) {
            let mut scores: Vec<f64> = v.iter().map(|x| (x.0 * 4.0).round() / 4.0).collect();
            let mut labels: Vec<bool> = v.iter().map(|x| x.1).collect();
            labels[0] = true;
            labels[1] = false;
            scores[0] = scores[0].max(0.0);
            let a = auroc(&scores, &labels).unwrap();
            let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
            prop_assert!((auroc(&neg, &labels).unwrap() - (1.0 - a)).abs() < 1e-12);
            let mono: Vec<f64> = scores.iter().map(|s| (s + 1.0).ln() * 3.0 + 7.0).collect();
            prop_assert!((auroc(&mono, &labels).unwrap() - a).abs() < 1e-12);
        }
    }

    fn brute_matching(w: &[Vec<f64>]) -> f64 {
        let cols = w[0].len();
        let mut idx: Vec<usize> = (0..cols.max(w.len())).collect();
        let mut best = 0.0f64;
        permute(&mut idx, 0, &mut |perm| {
            let total: f64 = (0..w.len()).filter(|r| perm[*r] < cols).map(|r| w[r][perm[r]]).sum();
            best = best.max(total);
        });
        best
    }

    fn permute(v: &mut Vec<usize>, k: usize, f: &mut dyn FnMut(&[usize])) {
        if k == v.len() {
            f(v);
            return;
        }
        for i in k..v.len() {
            v.swap(k, i);
            permute(v, k + 1, f);
            v.swap(k, i);
        }
    }

    #[test]
    fn hungarian_matches_brute_force() {
        let mut rng = seeds::rng(5);
        for _ in 0..300 {
            let r = rng.random_range(1..6);
            let c = rng.random_range(1..6);
            let w: Vec<Vec<f64>> = (0..r).map(|_| (0..c).map(|_| rng.random_range(0..20) as f64).collect()).collect();
            let assignment = max_weight_matching(&w);
            let used: Vec<usize> = assignment.iter().flatten().copied().collect();
            let unique: BTreeSet<usize> = used.iter().copied().collect();
            assert_eq!(unique.len(), used.len());
            let total: f64 = assignment.iter().enumerate().filter_map(|(i, c)| c.map(|c| w[i][c])).sum();
            assert_eq!(total, brute_matching(&w), "{w:?}");
        }
    }

    #[test]
    fn discovered_ids_align_with_truth() {
        let pairs = vec![(100, 5), (100, 5), (100, 4), (101, 4), (101, 4), (0, 0), (102, 0)];
        let discovered: BTreeSet<ClassId> = [100, 101, 102].into_iter().collect();
        let known: BTreeSet<ClassId> = [0].into_iter().collect();
        let m = match_discovered(&pairs, &discovered, &known);
        assert_eq!(m, [(100, 5), (101, 4)].into_iter().collect());
    }

    #[test]
    fn accuracy_examples() {
        let truth: HashMap<RecordId, ClassId> = (0..4).map(|i| (i, i as ClassId % 2)).collect();
        let all_right = TaskPredictions {
            test_ids: vec![0, 1, 2, 3],
            predictions: truth.clone(),
        };
        let all_wrong = TaskPredictions {
            test_ids: vec![0, 1],
            predictions: [(0, 1), (1, 0)].into_iter().collect(),
        };
        let s = continual_accuracy(&[all_right.clone(), all_wrong], &truth).unwrap();
        assert_eq!(s.per_task, vec![1.0, 0.0]);
        assert_eq!(s.cumulative, vec![1.0, 0.5]);
        let missing = TaskPredictions {
            test_ids: vec![0, 9],
            predictions: truth.clone(),
        };
        let err = continual_accuracy(&[missing], &truth).unwrap_err();
        assert!(err.to_string().contains('9'));
    }

    #[test]
    fn accuracy_matches_counting_fixture() {
        let mut rng = seeds::rng(50);
        let truth: HashMap<RecordId, ClassId> = (0..50).map(|i| (i, rng.random_range(0..4))).collect();
        let mut tasks = Vec::new();
        let mut ids: Vec<RecordId> = (0..50).collect();
        for _ in 0..3 {
            ids.shuffle(&mut rng);
            let test_ids = ids[..20].to_vec();
            let predictions = test_ids.iter().map(|id| (*id, rng.random_range(0..4))).collect();
            tasks.push(TaskPredictions { test_ids, predictions });
        }
        let s = continual_accuracy(&tasks, &truth).unwrap();
        let mut running = 0.0;
        for (k, t) in tasks.iter().enumerate() {
            let hits = t.test_ids.iter().filter(|id| t.predictions[id] == truth[id]).count();
            let acc = hits as f64 / 20.0;
            assert_eq!(s.per_task[k], acc);
            running += acc;
            assert!((s.cumulative[k] - running / (k + 1) as f64).abs() < 1e-12);
        }
    }

    fn report(method: &str, seed: u64) -> RunReport {
        let tasks = (0..3)
            .map(|t| TaskRecord {
                task: t,
                auroc: (t > 0).then_some(0.5 + 0.1 * t as f64 + seed as f64 * 0.01),
                test_accuracy: 0.9 - 0.1 * t as f64,
                cumulative_accuracy: 0.0,
                label_spend: t * 2,
                iterations: 3,
                novel_detected: 2,
                novel_true: 2,
            })
            .collect();
        RunReport::new(method, seed, 0.0125, tasks)
    }

    #[test]
    fn report_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let reports: Vec<RunReport> = ["couq", "dfm"]
            .iter()
            .flat_map(|m| [1, 2].map(|s| report(m, s)))
            .collect();
        emit_report(&reports, dir.path()).unwrap();
        let summary = fs::read(dir.path().join(SUMMARY_FILE)).unwrap();
        let mut rdr = csv::Reader::from_reader(summary.as_slice());
        let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
        assert_eq!(rows.len(), 12);

        let first = fs::read(dir.path().join(PLOT_FILE)).unwrap();
        emit_report(&reports, dir.path()).unwrap();
        assert_eq!(first, fs::read(dir.path().join(PLOT_FILE)).unwrap());
        assert_eq!(summary, fs::read(dir.path().join(SUMMARY_FILE)).unwrap());

        let loaded = load_reports(dir.path()).unwrap();
        assert_eq!(loaded.len(), 4);
        for r in &loaded {
            let orig = reports.iter().find(|o| o.method == r.method && o.seed == r.seed).unwrap();
            assert_eq!(r, orig);
            let aurocs: Vec<f64> = r.tasks.iter().filter_map(|t| t.auroc).collect();
            assert!((r.mean_auroc - aurocs.iter().sum::<f64>() / aurocs.len() as f64).abs() < 1e-9);
            for row in rows.iter().filter(|row| &row[0] == r.method.as_str() && row[1] == r.seed.to_string()) {
                let t: usize = row[2].parse().unwrap();
                assert_eq!(row[3].parse::<f64>().ok(), r.tasks[t].auroc);
            }
        }
    }

    #[test]
    fn empty_dir_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_reports(dir.path()).is_err());
    }
}
