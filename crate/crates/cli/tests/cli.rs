use std::path::Path;
use std::process::{Command, Output};

fn cool(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cool"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn cool")
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// Writes a small benchmark plus a short-run config named `short.toml`.
fn synth(dir: &Path) {
    ok(cool(&["synth", "--out", ".", "--n-source", "40", "--n-target", "24"], dir));
    let text = std::fs::read_to_string(dir.join("experiment.toml"))
        .unwrap()
        .replace("steps = 200", "steps = 4")
        .replace("k = 16", "k = 8")
        .replace("seeds = [1, 2, 3]", "seeds = [1, 2]");
    std::fs::write(dir.join("short.toml"), text).unwrap();
}

#[test]
fn ingest_reports_class_balance() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let out = ok(cool(&["ingest", "source.jsonl", "--out", "copy.jsonl"], dir.path()));
    assert!(out.contains("40 records"), "{out}");
    assert_eq!(
        std::fs::read_to_string(dir.path().join("copy.jsonl")).unwrap().lines().count(),
        40
    );
}

#[test]
fn ingest_strict_rejects_bad_lines_lenient_skips_them() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let mut text = std::fs::read_to_string(dir.path().join("target.jsonl")).unwrap();
    text.push_str("{not json\n");
    std::fs::write(dir.path().join("bad.jsonl"), text).unwrap();
    assert!(!cool(&["ingest", "bad.jsonl", "--role", "target"], dir.path()).status.success());
    let out = cool(&["ingest", "bad.jsonl", "--role", "target", "--lenient"], dir.path());
    assert!(ok(out).contains("24 records"));
}

#[test]
fn train_then_eval_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    ok(cool(&["train", "--config", "short.toml", "--seed", "2", "--checkpoint", "ck"], dir.path()));
    assert_eq!(
        std::fs::read_to_string(dir.path().join("ck/losses.jsonl")).unwrap().lines().count(),
        4
    );
    let out = ok(cool(&["eval", "--config", "short.toml", "--checkpoint", "ck"], dir.path()));
    let m: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert!(m["accuracy"].as_f64().is_some());
}

#[test]
fn eval_then_plot() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    ok(cool(&["eval", "--config", "short.toml"], dir.path()));
    assert!(dir.path().join("results/report.jsonl").exists());
    ok(cool(
        &["plot", "results", "--out", "plots", "--attention", "results/attention_seed1.jsonl"],
        dir.path(),
    ));
    assert!(dir.path().join("plots/accuracy.svg").exists());
}

#[test]
fn unknown_variant_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let out = cool(&["ablate", "--config", "short.toml", "--variant", "wo_XYZ"], dir.path());
    assert!(!out.status.success());
}
