use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use r1pool::bench::{metrics_report, AccuracyMatrix, MetricsReport};

fn r1pool(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_r1pool")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: &str = r#"{
  "seed": 4,
  "tasks": {"tasks": 3, "classes": 4, "input_dim": 8, "train_per_class": 6, "test_per_class": 5, "seed": 9},
  "model": {"hidden_dim": 8},
  "train": {"r": 6, "retain": 4, "merge_k": 2, "steps_per_task": 30, "batch_size": 8}
}"#;

struct Run {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    tasks: PathBuf,
    out: PathBuf,
}

fn small_run() -> Run {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let config = root.join("config.json");
    fs::write(&config, SMALL).unwrap();
    let tasks = root.join("tasks.json");
    let out = root.join("out");
    assert_eq!(code(&r1pool(&["gen-tasks", "--config", s(&config), "--out", s(&tasks)])), 0);
    let o = r1pool(&["train", "--config", s(&config), "--tasks", s(&tasks), "--out-dir", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    Run {
        _dir: dir,
        root,
        config,
        tasks,
        out,
    }
}

fn ckpts(run: &Run) -> Vec<String> {
    (1..=3)
        .map(|t| run.out.join(format!("task_{t}.json")).to_str().unwrap().to_string())
        .collect()
}

fn analyze(run: &Run, sub: &str, extra: &[&str]) -> String {
    let mut args = vec!["analyze", sub, "--checkpoint"];
    let files = ckpts(run);
    args.extend(files.iter().map(String::as_str));
    args.extend(extra);
    let o = r1pool(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

#[test]
fn gen_tasks_is_deterministic_and_sized() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, "{}").unwrap();
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    for p in [&a, &b] {
        assert_eq!(code(&r1pool(&["gen-tasks", "--config", s(&cfg), "--out", s(p)])), 0);
    }
    let (ta, tb) = (fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(ta, tb);
    let v: serde_json::Value = serde_json::from_slice(&ta).unwrap();
    let tasks = v["tasks"].as_array().unwrap();
    assert_eq!(tasks.len(), 5);
    for t in tasks {
        assert_eq!(t["train"].as_array().unwrap().len(), 250);
        assert_eq!(t["test"].as_array().unwrap().len(), 400);
    }

    fs::write(&cfg, r#"{"tasks": {"tasks": 1, "classes": 2, "input_dim": 3}}"#).unwrap();
    assert_eq!(code(&r1pool(&["gen-tasks", "--config", s(&cfg), "--out", s(&a)])), 0);
    let v: serde_json::Value = serde_json::from_slice(&fs::read(&a).unwrap()).unwrap();
    assert_eq!(v["tasks"].as_array().unwrap().len(), 1);

    // --seed wins over the config seed
    assert_eq!(code(&r1pool(&["gen-tasks", "--config", s(&cfg), "--out", s(&b), "--seed", "7"])), 0);
    let w: serde_json::Value = serde_json::from_slice(&fs::read(&b).unwrap()).unwrap();
    assert_eq!(w["spec"]["seed"], 7);
    assert_ne!(v["tasks"], w["tasks"]);
}

#[test]
fn bad_config_exits_2_naming_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"train": {"learning_rate": 0.1}}"#).unwrap();
    let o = r1pool(&["gen-tasks", "--config", s(&cfg), "--out", s(&dir.path().join("t.json"))]);
    assert_eq!(code(&o), 2);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("learning_rate") && err.contains("train"), "{err}");

    let o = r1pool(&["gen-tasks", "--config", s(&dir.path().join("nope.json")), "--out", "x"]);
    assert_eq!(code(&o), 4);
}

#[test]
fn train_outputs_are_consistent() {
    let run = small_run();
    let matrix = run.out.join("matrix.csv");
    let text = fs::read_to_string(&matrix).unwrap();
    assert!(text.starts_with("task_1,task_2,task_3\n"));
    assert_eq!(text.lines().count(), 4);

    // metrics.json equals the report recomputed from matrix.csv
    let o = r1pool(&["report", "--matrix", s(&matrix)]);
    assert_eq!(code(&o), 0);
    let reported: MetricsReport = serde_json::from_slice(&o.stdout).unwrap();
    let saved: MetricsReport = serde_json::from_str(&fs::read_to_string(run.out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(reported, saved);
    let m = AccuracyMatrix::read_csv(text.as_bytes()).unwrap();
    assert_eq!(metrics_report(&m), saved);

    // rerun in a second directory: byte-identical outputs
    let out2 = run.root.join("out2");
    let o = r1pool(&["train", "--config", s(&run.config), "--tasks", s(&run.tasks), "--out-dir", s(&out2)]);
    assert_eq!(code(&o), 0);
    for f in ["matrix.csv", "task_1.json", "task_2.json", "task_3.json", "collision.csv"] {
        assert_eq!(fs::read(run.out.join(f)).unwrap(), fs::read(out2.join(f)).unwrap(), "{f}");
    }

    // a different seed changes the run
    let out3 = run.root.join("out3");
    let o = r1pool(&[
        "train", "--config", s(&run.config), "--tasks", s(&run.tasks), "--out-dir", s(&out3), "--seed", "5",
    ]);
    assert_eq!(code(&o), 0);
    assert_ne!(fs::read(run.out.join("task_1.json")).unwrap(), fs::read(out3.join("task_1.json")).unwrap());
}

#[test]
fn report_edge_cases() {
    let dir = tempfile::tempdir().unwrap();
    let one = dir.path().join("one.csv");
    fs::write(&one, "task_1\n42.50\n").unwrap();
    let o = r1pool(&["report", "--matrix", s(&one)]);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v.get("transfer").is_none());
    assert_eq!(v["average"]["overall"], 42.5);
    assert_eq!(v["last"]["overall"], 42.5);

    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "task_1,task_2\n1.0,2.0\n3.0\n").unwrap();
    assert_eq!(code(&r1pool(&["report", "--matrix", s(&bad)])), 2);
    assert_eq!(code(&r1pool(&["report", "--matrix", s(&dir.path().join("missing.csv"))])), 4);
}

#[test]
fn analyze_outputs() {
    let run = small_run();

    let heat = analyze(&run, "heatmap", &[]);
    let rows: Vec<&str> = heat.lines().skip(1).collect();
    assert_eq!(rows.len(), 3 * 2 * 6);
    assert!(heat.starts_with("task_id,layer_id,expert_index,count,normalized_frequency,merged_flag\n"));
    for chunk in rows.chunks(6) {
        let sum: f64 = chunk.iter().map(|r| r.split(',').nth(4).unwrap().parse::<f64>().unwrap()).sum();
        assert!((sum - 4.0).abs() < 1e-5, "{sum}");
        assert_eq!(chunk.iter().filter(|r| r.ends_with("true")).count(), 2);
    }

    let frob = analyze(&run, "frob", &[]);
    let mut last: Option<(String, f64)> = None;
    for row in frob.lines().skip(1) {
        let f: Vec<&str> = row.split(',').collect();
        let key = format!("{}-{}", f[0], f[1]);
        let score: f64 = f[4].parse().unwrap();
        if let Some((k, prev)) = &last {
            if *k == key {
                assert!(score >= *prev);
            }
        }
        last = Some((key, score));
    }
    assert_eq!(frob.lines().count(), 1 + 3 * 2 * 6);

    // collision from checkpoints equals the final logged value of each task
    let coll = analyze(&run, "collision", &[]);
    let logged = fs::read_to_string(run.out.join("collision.csv")).unwrap();
    for row in coll.lines().skip(1) {
        let (t, v) = row.split_once(',').unwrap();
        let last = logged
            .lines()
            .skip(1)
            .filter(|l| l.split(',').next() == Some(t))
            .last()
            .unwrap();
        assert_eq!(last.rsplit(',').next().unwrap(), v, "task {t}");
    }
    assert!(coll.contains("\n1,0.000000\n"));

    let abl = analyze(&run, "ablate", &["--config", s(&run.config), "--tasks", s(&run.tasks)]);
    assert_eq!(abl.lines().count(), 1 + 2 * 6);
    let pairs = analyze(&run, "ablate", &["--config", s(&run.config), "--tasks", s(&run.tasks), "--pairs"]);
    assert_eq!(pairs.lines().count(), 1 + 2 * 5);

    // wrong seed means a different config digest
    let mut args = vec!["analyze", "ablate", "--checkpoint"];
    let files = ckpts(&run);
    args.extend(files.iter().map(String::as_str));
    args.extend(["--config", s(&run.config), "--tasks", s(&run.tasks), "--seed", "99"]);
    assert_eq!(code(&r1pool(&args)), 2);

    let o = r1pool(&["analyze", "heatmap", "--checkpoint", s(&run.root.join("none.json"))]);
    assert_eq!(code(&o), 4);
}
