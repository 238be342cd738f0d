use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

const SPEC: &str = r#"
normal = 4
anomaly = 4
test_normal = 2
test_anomaly = 2
segments = 8
frames_per_segment = 2
channels = 6
tracklets = 3
kind = "alternate"
duration = [0.25, 0.5]
magnitude = 4.0
noise = 1.0
seed = 7
"#;

const RUN: &str = r#"
[model]
conv_channels = 4
hidden = 4
selected = 2
ranker_width = 4

[train]
steps = 10
"#;

fn hsn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hsn")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("spec.toml"), SPEC).unwrap();
        fs::write(dir.path().join("run.toml"), RUN).unwrap();
        let f = Fixture { dir };
        let o = hsn(&["gen-data", "--spec", s(&f.path("spec.toml")), "--out", s(&f.path("data"))]);
        assert!(o.status.success(), "{}", stderr(&o));
        f
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn train(&self, out: &str, extra: &[&str]) -> Output {
        let (config, data, out) = (self.path("run.toml"), self.path("data"), self.path(out));
        let mut args = vec!["train", "--config", s(&config), "--data", s(&data), "--out", s(&out)];
        args.extend_from_slice(extra);
        hsn(&args)
    }
}

/// Relative path → contents, for every file under `root`.
fn digest(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_data_prints_manifest_and_is_reproducible() {
    let f = Fixture::new();
    let o = hsn(&["gen-data", "--spec", s(&f.path("spec.toml")), "--out", s(&f.path("again"))]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), s(&f.path("again/manifest.json")));
    assert_eq!(digest(&f.path("data")), digest(&f.path("again")));
}

#[test]
fn malformed_spec_is_a_usage_error() {
    let f = Fixture::new();
    fs::write(f.path("bad.toml"), "normal = \"many\"\n").unwrap();
    let o = hsn(&["gen-data", "--spec", s(&f.path("bad.toml")), "--out", s(&f.path("x"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("bad.toml"), "{}", stderr(&o));
    assert!(!f.path("x").exists());
}

#[test]
fn train_smoke_run_writes_checkpoint_and_log() {
    let f = Fixture::new();
    let t0 = Instant::now();
    let o = f.train("run", &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(t0.elapsed().as_secs_f64() < 10.0);
    assert!(f.path("run/checkpoint/checkpoint.json").is_file());
    let log: serde_json::Value = serde_json::from_slice(&fs::read(f.path("run/train_log.json")).unwrap()).unwrap();
    assert_eq!(log["steps"].as_array().unwrap().len(), 10);
    assert_eq!(log["phases"].as_array().unwrap().len(), 3);
    assert_eq!(log["seed"], 0);
    assert_eq!(log["config"]["train"]["loss"], "self-rectifying");
    assert_eq!(log["config"]["model"]["channels"], 6);
}

#[test]
fn loss_flag_overrides_config() {
    let f = Fixture::new();
    let o = f.train("run", &["--loss", "classical-ranking", "--schedule", "joint", "--seed", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let log: serde_json::Value = serde_json::from_slice(&fs::read(f.path("run/train_log.json")).unwrap()).unwrap();
    assert_eq!(log["config"]["train"]["loss"], "classical-ranking");
    assert_eq!(log["phases"].as_array().unwrap().len(), 1);
    assert_eq!(log["seed"], 3);
}

#[test]
fn training_is_deterministic() {
    let f = Fixture::new();
    assert!(f.train("a", &[]).status.success());
    assert!(f.train("b", &[]).status.success());
    assert_eq!(fs::read(f.path("a/train_log.json")).unwrap(), fs::read(f.path("b/train_log.json")).unwrap());
    assert_eq!(digest(&f.path("a/checkpoint")), digest(&f.path("b/checkpoint")));
}

#[test]
fn missing_data_leaves_no_checkpoint() {
    let f = Fixture::new();
    let (config, out) = (f.path("run.toml"), f.path("out"));
    let o = hsn(&["train", "--config", s(&config), "--data", "/no/such/dir", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!out.exists());
}

#[test]
fn bad_flag_values_are_usage_errors() {
    let f = Fixture::new();
    assert_eq!(f.train("run", &["--loss", "hinge"]).status.code(), Some(1));
    assert_eq!(f.train("run", &["--lr", "-1"]).status.code(), Some(1));
    assert_eq!(hsn(&["frobnicate"]).status.code(), Some(1));
    assert!(!f.path("run").exists());
    assert_eq!(hsn(&["--help"]).status.code(), Some(0));
}

#[test]
fn eval_is_repeatable_and_writes_extras() {
    let f = Fixture::new();
    assert!(f.train("run", &[]).status.success());
    let (ckpt, data) = (f.path("run/checkpoint/checkpoint.json"), f.path("data"));
    let eval = |report: &str, extra: &[&str]| {
        let report = f.path(report);
        let mut args = vec!["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--report", s(&report)];
        args.extend_from_slice(extra);
        let o = hsn(&args);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stdout(&o).starts_with("AUC "));
        serde_json::from_slice::<serde_json::Value>(&fs::read(report).unwrap()).unwrap()
    };
    let a = eval("a.json", &[]);
    let b = eval("b.json", &[]);
    assert_eq!(a, b);
    assert!(a.get("kfold").is_none());
    assert_eq!(a["videos"], 4);

    let dump = f.path("scores");
    let k = eval("k.json", &["--kfold", "5", "--dump-scores", s(&dump)]);
    let folds = k["kfold"]["folds"].as_array().unwrap();
    assert_eq!(folds.len(), 5);
    let mean = folds.iter().map(|f| f["auc"].as_f64().unwrap()).sum::<f64>() / 5.0;
    assert!((k["kfold"]["mean_auc"].as_f64().unwrap() - mean).abs() < 1e-12);

    let mut files: Vec<String> = fs::read_dir(&dump)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    files.sort();
    assert_eq!(files, ["test_a000.txt", "test_a001.txt", "test_n000.txt", "test_n001.txt"]);
    let lines = fs::read_to_string(dump.join("test_a000.txt")).unwrap();
    assert_eq!(lines.lines().count(), 16);
    assert!(lines.lines().all(|l| l.parse::<f64>().is_ok()));
}

#[test]
fn eval_names_the_mismatched_tensor() {
    let f = Fixture::new();
    assert!(f.train("run", &[]).status.success());
    let ckpt = f.path("run/checkpoint/checkpoint.json");
    let index: serde_json::Value = serde_json::from_slice(&fs::read(&ckpt).unwrap()).unwrap();
    let victim = &index["tensors"][5];
    let name = victim["name"].as_str().unwrap();
    let file = f.path("run/checkpoint").join(victim["file"].as_str().unwrap());
    let other = f.path("run/checkpoint").join(index["tensors"][0]["file"].as_str().unwrap());
    fs::copy(&other, &file).unwrap();
    let (data, report) = (f.path("data"), f.path("r.json"));
    let o = hsn(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--report", s(&report)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains(name), "{}", stderr(&o));
}

#[test]
fn gradcheck_table_and_fault_hook() {
    let o = hsn(&["gradcheck"]);
    assert!(o.status.success(), "{}", stdout(&o));
    let table = stdout(&o);
    for name in ["conv1d", "mgtm_forward", "fuse", "context_loss", "instance_loss"] {
        assert!(table.lines().any(|l| l.starts_with(name) && l.ends_with("PASS")), "{name}");
    }
    let o = hsn(&["gradcheck", "--corrupt", "mul"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stdout(&o).lines().any(|l| l.starts_with("mul ") && l.ends_with("FAIL")));
}

#[test]
fn compare_loss_reports_two_aucs_and_a_delta() {
    let f = Fixture::new();
    let (config, data) = (f.path("run.toml"), f.path("data"));
    let run = |out: &str| {
        let out = f.path(out);
        let o = hsn(&["compare-loss", "--config", s(&config), "--data", s(&data), "--out", s(&out)]);
        assert!(o.status.success(), "{}", stderr(&o));
        serde_json::from_slice::<serde_json::Value>(&fs::read(out).unwrap()).unwrap()
    };
    let a = run("a.json");
    let obj = a.as_object().unwrap();
    assert_eq!(obj.len(), 3);
    let (sr, cr) = (a["self_rectifying"].as_f64().unwrap(), a["classical_ranking"].as_f64().unwrap());
    assert!((a["delta"].as_f64().unwrap() - (sr - cr)).abs() < 1e-12);
    assert_eq!(a, run("b.json"));
}
