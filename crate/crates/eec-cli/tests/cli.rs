//! End-to-end tests that drive the compiled `eec` binary.

use std::path::Path;
use std::process::{Command, Output};

use eec_core::metrics::Mask;

fn eec(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eec"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary should spawn")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).expect("stdout should be UTF-8")
}

/// Strip the only non-deterministic field from JSONL output.
fn zero_wall_ms(text: &str) -> String {
    let mut rows = Vec::new();
    for line in text.lines() {
        let mut v: serde_json::Value = serde_json::from_str(line).expect("row should parse");
        v["wall_ms"] = 0.into();
        rows.push(v.to_string());
    }
    rows.join("\n")
}

fn write_spec(dir: &Path, body: &str) -> String {
    let path = dir.join("spec.json");
    std::fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn gen_data_then_compress_bench_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), r#"{"seed": 11, "frames": 40, "revisit_gap": 6}"#);

    let gen = eec(&["gen-data", "--spec", &spec, "--out", "s.eecs"], dir.path());
    assert!(gen.status.success(), "gen-data failed: {gen:?}");
    assert!(stdout(&gen).contains("frames 40"));
    assert!(dir.path().join("s.eecs").exists());

    let bench = eec(
        &["compress-bench", "--stream", "s.eecs", "--memory", "6", "--out", "bench.jsonl"],
        dir.path(),
    );
    assert!(bench.status.success(), "compress-bench failed: {bench:?}");
    let table = stdout(&bench);
    for policy in ["ours", "fifo", "cluster", "iou_select"] {
        assert!(table.contains(policy), "missing {policy} in:\n{table}");
    }

    let rows = std::fs::read_to_string(dir.path().join("bench.jsonl")).unwrap();
    assert_eq!(rows.lines().count(), 4);
    for line in rows.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["experiment"], "compress-bench");
        assert_eq!(v["memory"], 6);
        assert_eq!(v["frames"], 40);
    }
}

#[test]
fn every_command_is_bit_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), r#"{"seed": 7, "frames": 24, "revisit_gap": 4}"#);
    let gen = ["gen-data", "--spec", spec.as_str(), "--out", "s.eecs"];
    assert!(eec(&gen, dir.path()).status.success());

    let runs: Vec<Vec<&str>> = vec![
        vec!["gen-data", &spec, "--out", "again.eecs"],
        vec!["compress-bench", "--stream", "s.eecs", "--memory", "4", "--out", "r.jsonl"],
        vec!["moe-check", "--dims", "3,3,4", "--out", "r.jsonl"],
        vec!["train-toy", "--steps", "40", "--out", "r.jsonl"],
        vec!["sweep", &spec, "--memory", "3,5", "--out", "r.jsonl"],
    ];
    for mut args in runs {
        if args[0] == "gen-data" {
            args.insert(1, "--spec");
        }
        if args[0] == "sweep" {
            args.insert(1, "--spec");
        }
        let first = eec(&args, dir.path());
        assert!(first.status.success(), "{args:?} failed: {first:?}");
        let first_rows = std::fs::read_to_string(dir.path().join("r.jsonl")).ok();
        let first_stream = std::fs::read(dir.path().join("again.eecs")).ok();

        let second = eec(&args, dir.path());
        assert!(second.status.success());
        assert_eq!(stdout(&first), stdout(&second), "stdout differs for {args:?}");
        let second_rows = std::fs::read_to_string(dir.path().join("r.jsonl")).ok();
        let second_stream = std::fs::read(dir.path().join("again.eecs")).ok();

        if let (Some(a), Some(b)) = (&first_rows, &second_rows) {
            assert_eq!(zero_wall_ms(a), zero_wall_ms(b), "JSONL differs for {args:?}");
        }
        assert_eq!(first_stream, second_stream, "stream bytes differ");
    }
}

#[test]
fn eval_scores_identical_manifests_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    for (name, lit) in [("a.pgm", 0b1100u16), ("b.pgm", 0b0110u16)] {
        let mask = Mask::from_fn(2, 2, |i, j| lit >> (i * 2 + j) & 1 == 1).unwrap();
        eec_cli::formats::write_mask(&mask, &dir.path().join(name)).unwrap();
    }
    let manifest = "1 ego a.pgm 2 2\n2 ego b.pgm 2 2\n1 exo a.pgm 2 2\n";
    std::fs::write(dir.path().join("m.txt"), manifest).unwrap();

    let out = eec(&["eval", "--pred", "m.txt", "--gt", "m.txt", "--out", "e.jsonl"], dir.path());
    assert!(out.status.success(), "eval failed: {out:?}");
    let text = stdout(&out);
    assert!(text.contains("1.0000"), "expected perfect IoU in:\n{text}");

    let rows = std::fs::read_to_string(dir.path().join("e.jsonl")).unwrap();
    let subsets: Vec<String> = rows
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["experiment"]
            .as_str()
            .unwrap()
            .to_string())
        .collect();
    assert_eq!(subsets, ["eval", "eval:ego", "eval:exo"]);
    for line in rows.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["mean_iou"], 1.0);
        assert_eq!(v["mean_le"], 0.0);
    }
}

#[test]
fn eval_rejects_mismatched_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let mask = Mask::from_fn(2, 2, |i, _| i == 0).unwrap();
    eec_cli::formats::write_mask(&mask, &dir.path().join("a.pgm")).unwrap();
    std::fs::write(dir.path().join("pred.txt"), "1 ego a.pgm 2 2\n2 ego a.pgm 2 2\n").unwrap();
    std::fs::write(dir.path().join("gt.txt"), "1 ego a.pgm 2 2\n").unwrap();

    let out = eec(&["eval", "--pred", "pred.txt", "--gt", "gt.txt"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr).to_string();
    assert!(err.contains("missing ego frame 2"), "unexpected stderr: {err}");
}

#[test]
fn moe_check_passes_on_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let out = eec(&["moe-check"], dir.path());
    assert!(out.status.success(), "moe-check failed: {out:?}");
    let text = stdout(&out);
    assert!(text.contains("gradient check pass"));
    // stdout carries no timings; those go to stderr only.
    assert!(!text.contains("ms"), "stdout should not mention timing:\n{text}");
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(eec(&["no-such-command"], dir.path()).status.code(), Some(2));
    assert_eq!(eec(&["compress-bench"], dir.path()).status.code(), Some(2));
    assert_eq!(eec(&["moe-check", "--dims", "4,4"], dir.path()).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = eec(
        &["compress-bench", "--stream", "missing.eecs", "--memory", "4"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let spec = write_spec(dir.path(), r#"{"seed": 1, "frames": 8}"#);
    assert!(eec(&["gen-data", "--spec", &spec, "--out", "s.eecs"], dir.path())
        .status
        .success());
    let out = eec(
        &["compress-bench", "--stream", "s.eecs", "--memory", "4", "--policy", "lru"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown policy"));
}

#[test]
fn spec_rejects_unknown_fields_and_bad_geometry() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_spec(dir.path(), r#"{"seed": 1, "frames": 8, "colour": 3}"#);
    let out = eec(&["gen-data", "--spec", &bad, "--out", "s.eecs"], dir.path());
    assert_eq!(out.status.code(), Some(1));

    let tiny = write_spec(dir.path(), r#"{"seed": 1, "frames": 8, "channels": 4}"#);
    let out = eec(&["gen-data", "--spec", &tiny, "--out", "s.eecs"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("channel count"));
}
