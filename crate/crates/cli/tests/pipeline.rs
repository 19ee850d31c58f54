//! Integration tests for the CLI surface: smoke path, exit codes, stage
//! isolation, worker-count independence, and the quantized detection chain.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn hids_bin() -> &'static str {
    env!("CARGO_BIN_EXE_hids")
}

fn tmp(name: &str) -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).expect("create tmp dir");
    dir
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("pipeline.toml");
    std::fs::write(&path, body).expect("write config");
    path
}

fn hids(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(hids_bin())
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .expect("spawn hids")
}

/// Small corpus that still trains in about a second.
const SMALL: &str = r#"
[pipeline]
seed = 5

[synth]
normal_traces = 30
anomalous_traces = 6
trace_len = 256

[train]
epochs = 3
batch_size = 64

[forest]
psi = 64
"#;

#[test]
fn smoke_epochs_zero_single_trace() {
    let dir = tmp("smoke_zero");
    let config = write_config(
        &dir,
        r#"
[pipeline]
seed = 1

[synth]
normal_traces = 1
anomalous_traces = 0
trace_len = 2048

[train]
epochs = 0
"#,
    );
    let out = dir.join("out");
    let result = hids(&["run"], &config, &out);
    assert!(
        result.status.success(),
        "smoke run failed: {}",
        String::from_utf8_lossy(&result.stderr)
    );
    let report = std::fs::read_to_string(out.join("report.json")).expect("report exists");
    let parsed: serde_json::Value = serde_json::from_str(&report).expect("report parses");
    // No anomalies exist, so every metric degenerates to zero, but the
    // pipeline completes and the F1 field is present.
    assert_eq!(parsed["aggregates"]["f1"], 0.0);
}

#[test]
fn bad_fractions_exit_code_names_split() {
    let dir = tmp("bad_fracs");
    let config = write_config(&dir, "[ingest]\ntrain_frac = 0.9\nval_frac = 0.2\n");
    let result = hids(&["run"], &config, &dir.join("out"));
    assert_eq!(result.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&result.stderr);
    assert!(stderr.contains("split_dataset"), "stderr: {stderr}");
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tmp("unknown_key");
    let config = write_config(&dir, "[train]\nwarp_speed = 9\n");
    let result = hids(&["echo-config"], &config, &dir.join("out"));
    assert_eq!(result.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&result.stderr);
    assert!(stderr.contains("warp_speed"), "stderr: {stderr}");
}

#[test]
fn corrupt_artifact_exit_code() {
    let dir = tmp("corrupt");
    let config = write_config(&dir, SMALL);
    let out = dir.join("out");
    assert!(hids(&["run"], &config, &out).status.success());

    let model = out.join("model.bin");
    let bytes = std::fs::read(&model).expect("model bytes");
    std::fs::write(&model, &bytes[..bytes.len() / 3]).expect("truncate");
    let result = hids(&["detect"], &config, &out);
    assert_eq!(result.status.code(), Some(4));
    let stderr = String::from_utf8_lossy(&result.stderr);
    assert!(stderr.contains("corrupt"), "stderr: {stderr}");
}

#[test]
fn divergence_exit_code() {
    let dir = tmp("diverge");
    let config = write_config(
        &dir,
        r#"
[pipeline]
seed = 2

[synth]
normal_traces = 10
anomalous_traces = 0
trace_len = 256

[train]
epochs = 4
batch_size = 16
learning_rate = 1e160
"#,
    );
    let out = dir.join("out");
    assert!(hids(&["synth"], &config, &out).status.success());
    assert!(hids(&["ingest"], &config, &out).status.success());
    let result = hids(&["train"], &config, &out);
    assert_eq!(result.status.code(), Some(5));
}

#[test]
fn missing_artifact_exit_code() {
    let dir = tmp("missing");
    let config = write_config(&dir, SMALL);
    let result = hids(&["detect"], &config, &dir.join("out"));
    assert_eq!(result.status.code(), Some(4));
}

#[test]
fn echo_config_roundtrips() {
    let dir = tmp("echo");
    let config = write_config(&dir, "[train]\nepochs = 9\n");
    let result = hids(&["echo-config"], &config, &dir.join("out"));
    assert!(result.status.success());
    let text = String::from_utf8(result.stdout).expect("utf-8");
    let parsed: hids_cli::PipelineConfig = toml::from_str(&text).expect("echoed config parses");
    assert_eq!(parsed.train.epochs, 9);
    assert_eq!(parsed.forest.trees, 100);
}

#[test]
fn stage_isolation_reproduces_report() {
    let dir = tmp("isolation");
    let config = write_config(&dir, &SMALL.replace("quantize = true", ""));
    let out = dir.join("out");
    assert!(hids(&["run"], &config, &out).status.success());
    let report_before = std::fs::read(out.join("report.json")).expect("report");

    // Drop the forest and everything downstream of it, then rebuild only
    // those stages; the final report must come back byte-identical.
    for file in ["forest.bin", "threshold.bin", "detections.csv", "report.json", "report.txt"] {
        std::fs::remove_file(out.join(file)).expect("remove");
    }
    for sub in ["fit-forest", "calibrate", "detect", "eval"] {
        let result = hids(&[sub], &config, &out);
        assert!(
            result.status.success(),
            "{sub} failed: {}",
            String::from_utf8_lossy(&result.stderr)
        );
    }
    let report_after = std::fs::read(out.join("report.json")).expect("report");
    assert_eq!(report_before, report_after);
}

#[test]
fn worker_count_does_not_change_forest() {
    let dir = tmp("workers");
    let config = write_config(&dir, SMALL);
    let out = dir.join("out");
    assert!(hids(&["synth"], &config, &out).status.success());
    assert!(hids(&["ingest"], &config, &out).status.success());
    assert!(hids(&["train"], &config, &out).status.success());

    let run_forest = |threads: &str| {
        let result = Command::new(hids_bin())
            .args(["fit-forest", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(&out)
            .env("LIGHT_HIDS_THREADS", threads)
            .output()
            .expect("spawn");
        assert!(result.status.success());
        std::fs::read(out.join("forest.bin")).expect("forest bytes")
    };
    assert_eq!(run_forest("1"), run_forest("4"));
}

#[test]
fn quantized_chain_matches_rerun() {
    let dir = tmp("quantized");
    let config = write_config(&dir, SMALL);
    let out = dir.join("out");
    assert!(hids(&["run"], &config, &out).status.success());
    let detections = std::fs::read(out.join("detections_q.csv")).expect("quantized detections");

    std::fs::remove_file(out.join("detections_q.csv")).expect("remove");
    let result = hids(&["detect", "--quantized"], &config, &out);
    assert!(result.status.success());
    assert_eq!(std::fs::read(out.join("detections_q.csv")).expect("rerun"), detections);
}

#[test]
fn bench_reports_consistent_aggregates() {
    let dir = tmp("bench");
    let config = write_config(&dir, &format!("{SMALL}\n[bench]\nrepetitions = 1\n"));
    let out = dir.join("out");
    assert!(hids(&["run"], &config, &out).status.success());
    let result = hids(&["bench"], &config, &out);
    assert!(
        result.status.success(),
        "bench failed: {}",
        String::from_utf8_lossy(&result.stderr)
    );
    let report: hids_cli::BenchReport =
        serde_json::from_str(&std::fs::read_to_string(out.join("bench.json")).expect("bench.json"))
            .expect("bench report parses");

    let recomputed = hids_cli::BenchTiming::from_samples(report.float.per_sample_seconds.clone());
    assert_eq!(recomputed.mean, report.float.mean);
    assert_eq!(recomputed.median, report.float.median);
    assert_eq!(recomputed.p95, report.float.p95);

    let ratio =
        report.quantized_payload_bytes.expect("quantized payload") as f64 / report.float_payload_bytes as f64;
    assert!(ratio <= 0.30, "payload ratio {ratio}");
}
