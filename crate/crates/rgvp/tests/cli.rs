use std::path::Path;
use std::process::{Command, Output};

fn rgvp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rgvp"))
        .args(args)
        .env("RGVP_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = rgvp(args);
    assert!(
        out.status.success(),
        "rgvp {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: &str = "relations = 6
[schedule]
steps = 6
warmup_steps = 2
checkpoint_every = 3
[schedule.batch_sizes]
captions = 4
entities = 2
mrc = 2
vsg = 4
[model]
d_model = 16
proj_dim = 8
mrc_hidden = 8
[eval]
retrieval_n = 5
";

#[test]
fn help_and_usage_errors() {
    let out = rgvp(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("train"));
    assert_eq!(rgvp(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(rgvp(&["train"]).status.code(), Some(2));
}

#[test]
fn mask_prints_grid() {
    let grid = ok(&["mask", "--bbox", "0,0,16,16", "--grid", "4", "--image-size", "64"]);
    assert_eq!(grid.lines().count(), 4);
    assert_eq!(grid.lines().next().unwrap().chars().filter(|c| *c == '#').count(), 1);
    let bad = rgvp(&["mask", "--bbox", "0,0,90,16"]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    let cfg = tmp.path().join("small.toml");
    std::fs::write(&cfg, SMALL).unwrap();

    let stats = ok(&["synth", "--n", "40", "--out", s(&data), "--seed", "3"]);
    assert!(stats.contains("images"));
    for f in ["dataset.jsonl", "splits.json", "images"] {
        assert!(data.join(f).exists(), "{f}");
    }

    let prep = tmp.path().join("prep");
    ok(&["prepare", "--data", s(&data), "--out", s(&prep), "--relations", "6"]);
    let rels = std::fs::read_to_string(prep.join("relations.txt")).unwrap();
    assert_eq!(rels.lines().count(), 6);

    let text = ok(&["verbalise", "--data", s(&data), "--id", "scene00000", "--k", "3"]);
    assert!(text.starts_with("[CLS] ") && text.trim_end().ends_with("[SEP]"));

    let ck = ok(&[
        "train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run), "--ablation", "vsg,mrc", "--seed", "1",
    ]);
    assert!(ck.trim().ends_with("step_0000006.rgvp"));
    let log = std::fs::read_to_string(run.join("log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 6);
    for f in ["manifest.json", "config.toml", "tokens.txt", "relations.txt", "checkpoints.json"] {
        assert!(run.join(f).exists(), "{f}");
    }

    let report = tmp.path().join("eval.json");
    ok(&[
        "eval", "--checkpoint", ck.trim(), "--data", s(&data), "--task", "foils,retrieval,mrc", "--retrieval-n", "4",
        "--out", s(&report),
    ]);
    let reports: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(reports.as_array().unwrap().len(), 3);
    assert!(reports[1]["metrics"]["tr1"].as_f64().is_some());
    assert_eq!(reports[0]["checkpoint_step"], 6);

    let best = ok(&["select", "--run", s(&run), "--metric", "dev.tr1"]);
    assert!(best.contains("step_"));
    let missing = rgvp(&["select", "--run", s(&run), "--metric", "dev.nope"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("missing_metric"));

    ok(&["study", "--run", s(&run)]);
    let csv = std::fs::read_to_string(run.join("study.csv")).unwrap();
    assert!(csv.starts_with("step,metric,value\n"));
    assert!(run.join("study.json").exists());
}

#[test]
fn bad_dataset_names_the_record() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&["synth", "--n", "5", "--out", s(&data)]);
    let path = data.join("dataset.jsonl");
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let mut rec: serde_json::Value = serde_json::from_str(&lines[2]).unwrap();
    let id = rec["id"].as_str().unwrap().to_string();
    rec["entities"][0]["bbox"] = serde_json::json!([30.0, 10.0, 20.0, 40.0]);
    lines[2] = rec.to_string();
    std::fs::write(&path, lines.join("\n") + "\n").unwrap();

    let out = rgvp(&["verbalise", "--data", s(&data), "--id", &id]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains(&id), "{err}");

    std::fs::write(&path, "{not json\n").unwrap();
    let out = rgvp(&["verbalise", "--data", s(&data), "--id", "x"]);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("dataset.jsonl:1:"), "{err}");
}
