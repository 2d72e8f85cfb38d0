use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use couq_core::featstore::{load_features, FileFormat};

const SMALL: &str = r#"
methods = ["couq", "dfm"]
seeds = [3, 4]

[dataset.synthetic]
n_classes = 6
dim = 8
per_class = 300
cluster_spread = 1.0
center_spread = 8.0

[stream]
schedule = [[0, 1, 2, 3], [4, 5]]
holdout_frac = 0.5
test_frac = 0.2
new_per_class = 40

[couq]
budget_fraction = 0.05
max_iterations = 3

[couq.fit]
variance_retained = 0.7

[couq.mapper_net]
hidden = 16
max_epochs = 30

[replay]
capacity = 200

[classifier.train]
hidden = 32
max_epochs = 30
"#;

fn couq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_couq"))
        .args(args)
        .env("COUQ_LOG", "error")
        .output()
        .expect("spawn couq")
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("config.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn reports(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.starts_with("report_") && n.ends_with(".json"))
        .map(|n| {
            let bytes = std::fs::read(dir.join(&n)).unwrap();
            (n, bytes)
        })
        .collect();
    out.sort();
    out
}

#[test]
fn gen_synthetic_writes_every_record_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let a = dir.path().join("a.feat");
    let b = dir.path().join("b.feat");
    for out in [&a, &b] {
        let o = couq(&["gen-synthetic", "--config", s(&cfg), "--out", s(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let fs = load_features(&a, FileFormat::from_path(&a)).unwrap();
    assert_eq!(fs.len(), 1800);
    assert_eq!(fs.dim(), 8);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let other = dir.path().join("c.feat");
    let o = couq(&["gen-synthetic", "--config", s(&cfg), "--out", s(&other), "--seed", "99"]);
    assert!(o.status.success());
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&other).unwrap());
}

#[test]
fn run_eval_and_score_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("run");
    let o = couq(&["run", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let first = reports(&out);
    let names: Vec<&str> = first.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(
        names,
        vec!["report_couq_seed3.json", "report_couq_seed4.json", "report_dfm_seed3.json", "report_dfm_seed4.json"]
    );
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("MANIFEST.json")).unwrap()).unwrap();
    assert_eq!(manifest["status"], "complete");
    assert_eq!(manifest["runs"].as_array().unwrap().len(), 4);
    assert!(out.join("summary.csv").exists());
    assert!(out.join("tasks/couq_seed3_task1.json").exists());
    assert!(out.join("predictions/dfm_seed4_task1.csv").exists());

    let o = couq(&["eval", "--out", s(&out)]);
    assert!(o.status.success());
    let table = String::from_utf8(o.stdout).unwrap();
    assert!(table.lines().any(|l| l.starts_with("couq ")));
    assert!(table.lines().any(|l| l.starts_with("dfm ")));
    assert_eq!(std::fs::read_to_string(out.join("eval.csv")).unwrap().lines().count(), 3);

    // same config, fresh directory: byte-identical reports
    let again = dir.path().join("again");
    assert!(couq(&["run", "--config", s(&cfg), "--out", s(&again)]).status.success());
    assert_eq!(first, reports(&again));

    let feats = dir.path().join("pool.csv");
    assert!(couq(&["gen-synthetic", "--config", s(&cfg), "--out", s(&feats), "--seed", "3"]).status.success());
    let scored = dir.path().join("scores.csv");
    let ck = out.join("checkpoints/couq_seed3_task1.ck");
    let o = couq(&["score", "--checkpoint", s(&ck), "--features", s(&feats), "--out", s(&scored)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&scored).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("id,numerator,score,predicted_class"));
    assert_eq!(lines.count(), 1800);
}

#[test]
fn method_and_seed_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("run");
    let o = couq(&["run", "--config", s(&cfg), "--methods", "dfm", "--seeds", "5", "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let names: Vec<String> = reports(&out).into_iter().map(|(n, _)| n).collect();
    assert_eq!(names, vec!["report_dfm_seed5.json"]);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();

    // unknown key: config error
    let bad = write_config(dir.path(), &format!("{SMALL}\nsurprise = 1\n"));
    assert_eq!(couq(&["run", "--config", s(&bad), "--out", s(&dir.path().join("x"))]).status.code(), Some(2));

    let cfg = write_config(dir.path(), SMALL);
    let o = couq(&["run", "--config", s(&cfg), "--methods", "nonsense", "--out", s(&dir.path().join("y"))]);
    assert_eq!(o.status.code(), Some(2));

    // usage error
    assert_eq!(couq(&["run"]).status.code(), Some(2));

    // a directory without reports: data error
    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    assert_eq!(couq(&["eval", "--out", s(&empty)]).status.code(), Some(3));

    // missing checkpoint: data error
    let o = couq(&[
        "score",
        "--checkpoint",
        s(&dir.path().join("none.ck")),
        "--features",
        s(&dir.path().join("none.feat")),
        "--out",
        s(&dir.path().join("o.csv")),
    ]);
    assert_eq!(o.status.code(), Some(3));

    // dataset path that does not exist: data error
    let missing = write_config(
        dir.path(),
        &SMALL.replace(
            "[dataset.synthetic]\nn_classes = 6\ndim = 8\nper_class = 300\ncluster_spread = 1.0\ncenter_spread = 8.0\n",
            "[dataset]\npath = \"/nonexistent/features.feat\"\n",
        ),
    );
    assert_eq!(couq(&["run", "--config", s(&missing), "--out", s(&dir.path().join("z"))]).status.code(), Some(3));
}
