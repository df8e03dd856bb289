use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_moe-lpr");

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY_MODEL: [&str; 10] = [
    "--hidden",
    "16",
    "--layers",
    "1",
    "--heads",
    "2",
    "--ffn-dim",
    "32",
    "--max-seq-len",
    "16",
];

/// gen-synth then a tiny dense pretrain; returns (data dir, dense checkpoint).
fn dense_fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let data = dir.join("data");
    ok(&[
        "gen-synth",
        "--out-dir",
        p(&data),
        "--docs",
        "6",
        "--eval-docs",
        "2",
        "--doc-len",
        "40",
    ]);
    let dense = dir.join("dense.ckpt");
    let corpus = data.join("pretrain.jsonl");
    let mut args = vec![
        "pretrain",
        "--data",
        p(&corpus),
        "--out",
        p(&dense),
        "--steps",
        "3",
        "--batch-size",
        "2",
        "--seq-len",
        "16",
    ];
    args.extend(TINY_MODEL);
    ok(&args);
    (data, dense)
}

fn parse_csv(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn two_stage_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (data, dense) = dense_fixture(d);
    for name in [
        "pretrain.jsonl",
        "original.jsonl",
        "expanded.jsonl",
        "review.jsonl",
        "eval.jsonl",
        "manifest.json",
    ] {
        assert!(data.join(name).exists(), "{name}");
    }

    let moe = d.join("moe.ckpt");
    ok(&["upcycle", "--in", p(&dense), "--out", p(&moe)]);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("moe.ckpt.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["model"]["moe"]["num_experts"], 6);
    assert_eq!(manifest["model"]["moe"]["top_k"], 2);

    let s1 = d.join("s1.ckpt");
    ok(&[
        "train",
        "--model",
        p(&moe),
        "--data",
        p(&data.join("expanded.jsonl")),
        "--out",
        p(&s1),
        "--steps",
        "2",
        "--batch-size",
        "2",
        "--seq-len",
        "16",
    ]);
    let s2 = d.join("s2.ckpt");
    ok(&[
        "review",
        "--model",
        p(&s1),
        "--data",
        p(&data.join("review.jsonl")),
        "--out",
        p(&s2),
        "--steps",
        "2",
        "--seq-len",
        "16",
    ]);
    let log = std::fs::read_to_string(d.join("s2.ckpt.log.ndjson")).unwrap();
    assert_eq!(log.lines().count(), 2);
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(first["balance"], 0.0);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("s2.ckpt.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "review");
    assert_eq!(manifest["stage"]["gamma"], 0.1);

    let table = ok(&["eval", "--model", p(&s2), "--data", p(&data.join("eval.jsonl"))]);
    let rows = parse_csv(&String::from_utf8(table.stdout).unwrap());
    assert_eq!(rows[0][0], "lang");
    assert_eq!(rows.len(), 3);
    let routes = ok(&["route-stats", "--model", p(&s2), "--data", p(&data.join("eval.jsonl"))]);
    let rows = parse_csv(&String::from_utf8(routes.stdout).unwrap());
    assert_eq!(rows[0][3], "mean_g0");
    assert_eq!(rows.len(), 3);
}

#[test]
fn expert_copy_eval_matches_dense() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (data, dense) = dense_fixture(d);
    let moe = d.join("moe.ckpt");
    ok(&["upcycle", "--in", p(&dense), "--out", p(&moe), "--experts", "4"]);
    let eval = p(&data.join("eval.jsonl")).to_owned();
    let a = ok(&["eval", "--model", p(&dense), "--data", &eval]);
    let b = ok(&["eval", "--model", p(&moe), "--data", &eval]);
    let (a, b) = (
        parse_csv(&String::from_utf8(a.stdout).unwrap()),
        parse_csv(&String::from_utf8(b.stdout).unwrap()),
    );
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b).skip(1) {
        assert_eq!(x[..3], y[..3]);
        let (lx, ly): (f64, f64) = (x[3].parse().unwrap(), y[3].parse().unwrap());
        assert!((lx - ly).abs() < 1e-9, "{lx} vs {ly}");
    }
    assert_eq!(
        run(&["route-stats", "--model", p(&dense), "--data", &eval])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut ckpts = Vec::new();
    for name in ["a", "b"] {
        let d = dir.path().join(name);
        std::fs::create_dir_all(&d).unwrap();
        let (_, dense) = dense_fixture(&d);
        ckpts.push((
            std::fs::read(&dense).unwrap(),
            std::fs::read(d.join("dense.ckpt.log.ndjson")).unwrap(),
        ));
    }
    assert_eq!(ckpts[0], ckpts[1]);
}

#[test]
fn review_refuses_alpha() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "review",
        "--model",
        "m.ckpt",
        "--data",
        "r.jsonl",
        "--out",
        p(&dir.path().join("x")),
        "--alpha",
        "0.01",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("--alpha is a stage-1 setting"), "{err}");
}

#[test]
fn bad_invocations_map_to_exit_codes() {
    assert_eq!(run(&["eval", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(run(&["eval", "--data", "x.jsonl"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.ckpt");
    assert_eq!(
        run(&["upcycle", "--in", p(&missing), "--out", "o.ckpt"]).status.code(),
        Some(5)
    );
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"definitely not a checkpoint").unwrap();
    assert_eq!(
        run(&["upcycle", "--in", p(&junk), "--out", "o.ckpt"]).status.code(),
        Some(3)
    );
    assert_eq!(
        run(&["upcycle", "--in", p(&junk), "--out", "o.ckpt", "--init", "zeros"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn config_file_fills_unset_flags() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (_, dense) = dense_fixture(d);
    let cfg = d.join("run.toml");
    std::fs::write(&cfg, "[upcycle]\nexperts = 3\ntop-k = 1\ninit = \"random\"\n").unwrap();
    let moe = d.join("moe.ckpt");
    ok(&[
        "upcycle",
        "--config",
        p(&cfg),
        "--in",
        p(&dense),
        "--out",
        p(&moe),
        "--top-k",
        "2",
    ]);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("moe.ckpt.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["model"]["moe"]["num_experts"], 3);
    assert_eq!(manifest["model"]["moe"]["top_k"], 2);
    assert_eq!(manifest["arguments"]["init"], "random");
    assert!(manifest["config_file"].as_str().unwrap().ends_with("run.toml"));

    std::fs::write(&cfg, "[upcycle]\nexprets = 3\n").unwrap();
    let out = run(&["upcycle", "--config", p(&cfg), "--in", p(&dense), "--out", p(&moe)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("exprets"));
}
