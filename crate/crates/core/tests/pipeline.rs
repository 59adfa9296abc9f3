use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use softsense::experiment::{files, ExperimentReport};

const CONFIG: &str = r#"
seed = 7
out_dir = "runs"

[data.synthetic]
num_features = 12
informative = [[0, 4, 8], [1, 5]]
nuisance = [2, 6]
signal = 1.5
tasks = [
  { train = { neg = 200, pos = 20 }, valid = { neg = 100, pos = 10 }, test = { neg = 100, pos = 10 } },
  { train = { neg = 150, pos = 30 }, valid = { neg = 80, pos = 10 }, test = { neg = 80, pos = 10 } },
]

[model]
kernels_per_branch = 4
hidden_width = 8

[train]
epochs = 4
batch_size = 32

[finetune]
rounds = 3
"#;

fn softsense(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_softsense"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("exp.toml"), CONFIG).unwrap();
    dir
}

fn experiment_dir(root: &Path) -> PathBuf {
    let mut dirs: Vec<_> = std::fs::read_dir(root.join("runs")).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(dirs.len(), 1);
    dirs.pop().unwrap()
}

#[test]
fn full_runs_are_byte_identical() {
    let (a, b) = (workspace(), workspace());
    for w in [&a, &b] {
        ok(&softsense(w.path(), &["run", "--config", "exp.toml"]));
    }
    let (da, db) = (experiment_dir(a.path()), experiment_dir(b.path()));
    assert_eq!(da.file_name(), db.file_name());
    for name in [
        files::REPORT,
        files::BASELINE,
        files::FINETUNED,
        files::TRACE_JSON,
        files::SALIENCY_MAPS,
        files::SALIENCY_BY_CELL,
        files::LOSS_TRACE,
    ] {
        assert_eq!(std::fs::read(da.join(name)).unwrap(), std::fs::read(db.join(name)).unwrap(), "{name}");
    }
    let report: ExperimentReport = serde_json::from_slice(&std::fs::read(da.join(files::REPORT)).unwrap()).unwrap();
    let tasks: Vec<usize> = report.tasks.iter().map(|t| t.task).collect();
    assert_eq!(tasks, vec![0, 1]);
    assert!(da.join(files::TIMING).exists());
}

#[test]
fn staged_commands_and_self_report() {
    let w = workspace();
    let cfg = ["--config", "exp.toml"];
    let run = |cmd: &[&str]| ok(&softsense(w.path(), &[cmd, &cfg].concat()));
    assert_eq!(run(&["generate"]).lines().count(), 3);
    let baseline = run(&["train"]).trim().to_string();
    let exp = experiment_dir(w.path());
    assert_eq!(w.path().join(&baseline), exp.join(files::BASELINE));
    assert_eq!(run(&["visualize"]).lines().count(), 3);
    run(&["finetune"]);
    run(&["evaluate", "--checkpoint", &baseline]);
    run(&["evaluate"]);
    run(&["evaluate", "--split", "valid"]);
    assert!(exp.join(files::metrics("finetuned", "valid")).exists());
    run(&["report"]);

    let m = exp.join(files::metrics("baseline", "test"));
    let m = m.to_str().unwrap();
    run(&["report", "--baseline", m, "--finetuned", m]);
    let report: ExperimentReport = serde_json::from_slice(&std::fs::read(exp.join(files::REPORT)).unwrap()).unwrap();
    assert_eq!(report.tasks.len(), 2);
    assert!(report.tasks.iter().all(|t| t.delta_auroc == 0.0 && t.delta_tpr == 0.0));

    let by_class = std::fs::read_to_string(exp.join(files::SALIENCY_BY_CLASS)).unwrap();
    assert!(by_class.starts_with("group,task,class,count,t,feature_index,value\n"));
}

#[test]
fn failures_map_to_exit_codes() {
    let w = workspace();
    ok(&softsense(w.path(), &["train", "--config", "exp.toml"]));
    let ck = experiment_dir(w.path()).join(files::BASELINE);
    let mut bytes = std::fs::read(&ck).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    let bad = w.path().join("bad.ckpt");
    std::fs::write(&bad, bytes).unwrap();
    let out = softsense(w.path(), &["evaluate", "--config", "exp.toml", "--checkpoint", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("corrupt checkpoint"));

    let missing = softsense(w.path(), &["finetune", "--config", "exp.toml", "--checkpoint", "nope.ckpt"]);
    assert_eq!(missing.status.code(), Some(3));

    std::fs::write(w.path().join("bad.toml"), format!("{CONFIG}\n[extra]\nx = 1\n")).unwrap();
    let out = softsense(w.path(), &["train", "--config", "bad.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("validation"));

    assert_eq!(softsense(w.path(), &["train"]).status.code(), Some(2));
}

#[test]
fn seed_flag_selects_another_experiment() {
    let w = workspace();
    ok(&softsense(w.path(), &["generate", "--config", "exp.toml"]));
    ok(&softsense(w.path(), &["generate", "--config", "exp.toml", "--seed", "8", "--out", "other"]));
    let a = experiment_dir(w.path());
    let b: Vec<_> = std::fs::read_dir(w.path().join("other")).unwrap().collect();
    assert_eq!(b.len(), 1);
    let b = b.into_iter().next().unwrap().unwrap().path();
    assert_ne!(a.file_name(), b.file_name());
    let ta = std::fs::read(a.join("data/train.csv")).unwrap();
    let tb = std::fs::read(b.join("data/train.csv")).unwrap();
    assert_ne!(ta, tb);
}
