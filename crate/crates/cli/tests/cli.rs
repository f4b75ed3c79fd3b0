use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn tikzkit(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tikzkit"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout {}\nstderr {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn lines(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn tikzjax_config(dir: &Path) -> PathBuf {
    let cfg = dir.join("pipeline.toml");
    let driver = workspace().join("tools/tikzjax");
    fs::write(
        &cfg,
        format!(
            "mock_endpoints = true\ncache_dir = \"cache\"\n[compile]\npreset = \"tikzjax\"\ndriver_dir = {:?}\ntimeout_s = 20.0\n",
            driver.display().to_string()
        ),
    )
    .unwrap();
    cfg
}

fn tikzjax_installed() -> bool {
    workspace().join("tools/tikzjax/node_modules/node-tikzjax").exists()
}

#[test]
fn config_violations_are_listed_together() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "jobs = 0\n[filter]\nmin = 500\nmax = 10\n[grpo]\neps_low = -1.0\n").unwrap();
    let out = tikzkit(&["--config", "bad.toml", "grpo-score", "--input", "x.jsonl"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let report: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(report["status"], "error");
    let violations = report["violations"].as_array().unwrap();
    assert!(violations.len() >= 3, "{violations:?}");
    let text = serde_json::to_string(violations).unwrap();
    assert!(text.contains("jobs") && text.contains("filter.min") && text.contains("eps_low"));
}

#[test]
fn missing_flag_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = tikzkit(&["extract", "--output", "o.jsonl"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--input"));
}

#[test]
fn prompt_for_one_description() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&tikzkit(&["prompt", "--description", "A red circle above a blue square."], dir.path()));
    assert!(out.contains("A red circle above a blue square."));
}

#[test]
fn stages_compose_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&tikzkit(&["synth", "--docs", "40", "--seed", "3", "--output", "corpus.jsonl"], d));
    assert_eq!(lines(&d.join("corpus.jsonl")).len(), 40);
    assert_eq!(lines(&d.join("corpus.jsonl.categories.jsonl")).len(), 40);

    let report: Value = serde_json::from_str(&ok(&tikzkit(&["extract", "--input", "corpus.jsonl", "--output", "x.jsonl"], d))).unwrap();
    let extracted = lines(&d.join("x.jsonl"));
    assert_eq!(report["counts"]["records"].as_u64().unwrap() as usize, extracted.len());
    assert!(extracted.iter().all(|r| r["provenance"] == serde_json::json!(["extract"])));

    ok(&tikzkit(&["normalize", "--input", "x.jsonl", "--output", "n.jsonl"], d));
    let normalized = lines(&d.join("n.jsonl"));
    assert!(!normalized.is_empty() && normalized.len() <= extracted.len());
    for r in &normalized {
        let code = r["code"].as_str().unwrap();
        assert!(code.starts_with("\\documentclass[tikz]{standalone}") && code.ends_with("\\end{document}"));
    }

    let again: Value = serde_json::from_str(&ok(&tikzkit(&["normalize", "--input", "x.jsonl", "--output", "n.jsonl"], d))).unwrap();
    assert_eq!(again["resumed"], true);

    let stats: Value = serde_json::from_str(&ok(&tikzkit(&["stats", "--input", "n.jsonl"], d))).unwrap();
    assert_eq!(stats["total"].as_u64().unwrap() as usize, normalized.len());
}

#[test]
fn grpo_scores_in_both_formats() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let group = serde_json::json!({
        "group_id": "g",
        "rollouts": [
            {"logp_new": [-1.0, -2.0], "logp_old": [-1.0, -2.0], "reward": 1.0},
            {"logp_new": [-0.5], "logp_old": [-0.5], "reward": 0.0}
        ]
    });
    fs::write(d.join("batch.jsonl"), format!("{group}\n")).unwrap();
    ok(&tikzkit(&["grpo-score", "--input", "batch.jsonl", "--output", "scores.jsonl"], d));
    let scores = lines(&d.join("scores.jsonl"));
    assert_eq!(scores[0]["advantages"], serde_json::json!([0.5, -0.5]));
    ok(&tikzkit(&["grpo-score", "--input", "batch.jsonl", "--output", "scores.bin"], d));
    let bin = fs::read(d.join("scores.bin")).unwrap();
    assert_eq!(&bin[..8], b"GRPOSCR1");
}

#[test]
fn evaluate_joins_external_scores() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let sample = |id: &str, pred: &str| serde_json::json!({"record_id": id, "prediction": pred, "reference": "\\draw (0,0) -- (1,1);", "compiled": true});
    fs::write(
        d.join("samples.jsonl"),
        format!("{}\n{}\n", sample("a", "\\draw (0,0) -- (1,1);"), sample("b", "\\draw (0,0) -- (2,1);")),
    )
    .unwrap();
    fs::write(d.join("scores.csv"), "record_id,CLIP,DSim\na,0.2,0.6\nb,0.1,0.4\n").unwrap();
    let report: Value = serde_json::from_str(&ok(&tikzkit(&["evaluate", "--input", "samples.jsonl", "--scores", "scores.csv"], d))).unwrap();
    let ted = report["mean_ted"].as_f64().unwrap();
    let avg = report["avg"].as_f64().unwrap();
    assert!((avg - (0.15 + 0.5 + 1.0 - ted) / 3.0).abs() < 1e-12);
}

#[test]
fn compile_reuses_the_artifact_cache() {
    if !tikzjax_installed() {
        eprintln!("tikzjax backend not installed; skipping");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    tikzjax_config(d);
    let good = fs::read_to_string(workspace().join("fixtures/compile/good/arrows_shapes.tex")).unwrap();
    let records: Vec<Value> = ["a", "b"]
        .iter()
        .map(|id| serde_json::json!({"record_id": id, "source_kind": "curated", "origin_key": id, "code": good}))
        .collect();
    fs::write(
        d.join("in.jsonl"),
        records.iter().map(|r| format!("{r}\n")).collect::<String>(),
    )
    .unwrap();
    let first: Value = serde_json::from_str(&ok(&tikzkit(&["--config", "pipeline.toml", "compile", "--input", "in.jsonl", "--output", "c1.jsonl"], d))).unwrap();
    assert_eq!(first["counts"]["status_ok"], 2);
    let second: Value = serde_json::from_str(&ok(&tikzkit(&["--config", "pipeline.toml", "compile", "--input", "in.jsonl", "--output", "c2.jsonl"], d))).unwrap();
    assert_eq!((second["cache_hits"].as_u64(), second["cache_misses"].as_u64()), (Some(2), Some(0)));
    assert_eq!(fs::read(d.join("c1.jsonl")).unwrap(), fs::read(d.join("c2.jsonl")).unwrap());

    let compiled = lines(&d.join("c1.jsonl"));
    let png = d.join("cache").join(compiled[0]["image_artifact"].as_str().unwrap());
    let tasks = [
        serde_json::json!({"id": "same", "code": good, "reference": png}),
        serde_json::json!({"id": "unformatted", "code": "\\draw (0,0);", "reference": png}),
    ];
    fs::write(d.join("tasks.jsonl"), tasks.iter().map(|t| format!("{t}\n")).collect::<String>()).unwrap();
    let rows: Value = serde_json::from_str(&ok(&tikzkit(&["--config", "pipeline.toml", "reward", "--input", "tasks.jsonl"], d))).unwrap();
    assert!((rows[0]["reward"]["reward"].as_f64().unwrap() - 1.0).abs() < 1e-9, "{rows}");
    assert_eq!(rows[1]["reward"]["reward"].as_f64().unwrap(), 0.0);
}
