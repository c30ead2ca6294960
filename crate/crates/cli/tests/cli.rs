use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "world.entities=300",
    "world.queries=80",
    "world.topics=5",
    "world.pairs_per_day=20",
    "world.query_pairs_per_day=4",
    "train.steps=30",
    "train.batch_size=32",
    "train.negatives=32",
    "eval.m=200",
    "simulate.requests=1000",
];

fn omnisearch(out: &Path, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_omnisearch"));
    cmd.arg("--out").arg(out).env("RUST_LOG", "warn");
    for s in SMALL {
        cmd.args(["--set", s]);
    }
    cmd.args(args).output().expect("spawn omnisearch")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = omnisearch(out, args);
    assert!(o.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

#[test]
fn staged_flow() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    assert!(ok(out, &["dataset", "synth"]).contains("300 entities"));
    ok(out, &["enrich"]);
    ok(out, &["build-vocab"]);
    let train: serde_json::Value = serde_json::from_str(&ok(out, &["train"])).unwrap();
    assert_eq!(train["steps"], 30);
    let eval = ok(out, &["eval"]);
    assert!(eval.contains("entity_within_topic") && eval.contains("recall@10"), "{eval}");
    let publish: serde_json::Value = serde_json::from_str(&ok(out, &["publish"])).unwrap();
    assert_eq!(publish["accepted"], 300);
    ok(out, &["index", "build"]);
    let first = std::fs::read_to_string(out.join("world/queries.jsonl")).unwrap();
    let query: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    let search = ok(out, &["index", "search", "-q", query["text"].as_str().unwrap(), "-k", "3"]);
    assert_eq!(search.lines().count(), 3);
    let load: serde_json::Value = serde_json::from_str(&ok(out, &["simulate-load", "--requests", "500"])).unwrap();
    assert_eq!(load["requests"], 500);

    let served = ok(out, &["serve", "--request", r#"{"op":"stats"}"#, "--request", "nonsense"]);
    let lines: Vec<serde_json::Value> = served.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines[0]["type"], "stats");
    assert_eq!(lines[0]["entities"], 300);
    assert_eq!(lines[1]["type"], "error");

    // Artifacts from this config are refused under another one.
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_omnisearch"));
    cmd.arg("--out").arg(out).args(["--set", "train.steps=31"]);
    for s in SMALL.iter().filter(|s| !s.starts_with("train.steps")) {
        cmd.args(["--set", s]);
    }
    let o = cmd.arg("eval").output().unwrap();
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("config"));
}

#[test]
fn rejects_unknown_config_keys() {
    let dir = tempfile::tempdir().unwrap();
    let o = omnisearch(dir.path(), &["--set", "train.stepz=3", "config"]);
    assert!(!o.status.success());
    let o = omnisearch(dir.path(), &["--set", "train.steps", "config"]);
    assert!(!o.status.success());

    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[model]\nembed_dim = 0\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_omnisearch"))
        .arg("-c")
        .arg(&cfg)
        .arg("config")
        .output()
        .unwrap();
    assert!(!o.status.success());
}

#[test]
fn config_round_trips_through_file() {
    let dir = tempfile::tempdir().unwrap();
    let printed = ok(dir.path(), &["config"]);
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, &printed).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_omnisearch"))
        .arg("-c")
        .arg(&cfg)
        .arg("config")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(String::from_utf8(o.stdout).unwrap(), printed);
}

#[test]
fn help_lists_subcommands() {
    let o = Command::new(env!("CARGO_BIN_EXE_omnisearch")).arg("--help").output().unwrap();
    let text = String::from_utf8(o.stdout).unwrap();
    for sub in [
        "dataset",
        "enrich",
        "build-vocab",
        "train",
        "eval",
        "publish",
        "index",
        "serve",
        "simulate-load",
        "ablate",
        "run",
    ] {
        assert!(text.contains(sub), "help misses {sub}");
    }
}
