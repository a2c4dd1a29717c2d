use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_trust-motion"));
    c.env_remove("TRUST_MOTION_CONFIG").env("TRUST_MOTION_LOG", "warn");
    c
}

fn run(c: &mut Command) -> Output {
    let out = c.output().expect("binary runs");
    eprintln!("{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn small_corpus(dir: &Path) {
    let spec = dir.join("spec.in.json");
    fs::write(&spec, r#"{"n_events": 3000, "slices": 3, "n_subsystems": 5, "seed": 3}"#).unwrap();
    let out = run(bin().args(["synth", "--spec"]).arg(&spec).arg("--out").arg(dir));
    assert!(out.status.success());
}

#[test]
fn synth_then_pipeline_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    small_corpus(dir.path());
    let out = run(bin().arg("pipeline").env("TRUST_MOTION_CONFIG", dir.path().join("pipeline.json")));
    assert_eq!(out.status.code(), Some(0));
    let manifest = fs::read_to_string(dir.path().join("out/run_manifest.json")).unwrap();
    assert_eq!(manifest.matches(r#""completed""#).count(), 7);
    assert!(dir.path().join("out/trajectories.csv").is_file());
}

#[test]
fn invalid_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.json");
    fs::write(&config, r#"{"k": 0, "sgns": {"dim": 0}}"#).unwrap();
    let out = run(bin().args(["pipeline", "--config"]).arg(&config));
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("k ≥ 1") && err.contains("dim"), "{err}");

    let out = run(bin().args(["validate", "--config"]).arg(&config));
    assert_eq!(out.status.code(), Some(2));

    let out = run(bin().args(["pipeline", "--config"]).arg(dir.path().join("missing.json")));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn stage_failure_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("c.json");
    fs::write(&config, r#"{"input": "absent.jsonl", "reference": "ref.json"}"#).unwrap();
    let out = run(bin().args(["pipeline", "--config"]).arg(&config));
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ingest"));
    assert!(dir.path().join("out/run_manifest.json").is_file());
}

#[test]
fn unknown_resume_stage_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("c.json");
    fs::write(&config, "{}").unwrap();
    let out = run(bin().args(["pipeline", "--from-stage", "bogus", "--config"]).arg(&config));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn stage_commands_chain() {
    let dir = tempfile::tempdir().unwrap();
    small_corpus(dir.path());
    let d = |n: &str| dir.path().join(n);
    let ok = |c: &mut Command| assert!(run(c).status.success());
    ok(bin().args(["ingest", "--input"]).arg(d("events.jsonl")).arg("--output").arg(d("kept.jsonl")).arg("--stats").arg(d("stats.json")));
    ok(bin().args(["characterize", "--events"]).arg(d("kept.jsonl")).arg("--stats").arg(d("stats.json")).arg("--output").arg(d("chars.csv")));
    ok(bin()
        .args(["efa", "--factors", "5", "--accept-unconverged", "--chars"])
        .arg(d("chars.csv"))
        .arg("--model")
        .arg(d("model.json"))
        .arg("--scores")
        .arg(d("scores.csv")));
    ok(bin()
        .args(["cluster", "--k", "5", "--restarts", "5", "--scores"])
        .arg(d("scores.csv"))
        .arg("--labeled")
        .arg(d("labeled.csv"))
        .arg("--activity")
        .arg(d("activity.csv"))
        .arg("--model")
        .arg(d("clusters.json"))
        .env("TRUST_MOTION_SEED", "11"));
    let sgns = d("sgns.json");
    fs::write(&sgns, r#"{"dim": 8, "epochs": 2, "window": "2h"}"#).unwrap();
    ok(bin().args(["embed", "--activity"]).arg(d("activity.csv")).arg("--sgns").arg(&sgns).arg("--out").arg(d("embeds")));
    ok(bin().args(["align", "--embeds"]).arg(d("embeds")).arg("--out").arg(d("aligned")));
    let analyze = d("analyze.json");
    fs::write(&analyze, r#"{"projection": {"method": "pca"}, "max_tokens": 10}"#).unwrap();
    let out = run(bin()
        .args(["analyze", "--aligned"])
        .arg(d("aligned"))
        .arg("--reference")
        .arg(d("maintainers.json"))
        .arg("--cluster-model")
        .arg(d("clusters.json"))
        .arg("--config")
        .arg(&analyze)
        .arg("--trajectories")
        .arg(d("traj.csv")));
    assert!(out.status.success());
    assert!(!String::from_utf8_lossy(&out.stdout).trim().is_empty());
    assert!(d("traj.csv").is_file());

    let bad = run(bin().args(["cluster", "--k", "0", "--seed", "1", "--scores"]).arg(d("scores.csv")).arg("--labeled").arg(d("x.csv")));
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn synth_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let out = run(bin().args(["synth", "--seed", "5", "--out"]).arg(d.path()).env("TRUST_MOTION_LOG", "error"));
        assert!(out.status.success());
    }
    for f in ["events.jsonl", "truth.json", "plant.json", "factor_x.csv"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}
