//! CLI surface: subcommands, exit codes, and the trace file format.

use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fhpm-sim"))
}

#[test]
fn list_experiments_prints_the_registry() {
    let out = bin().arg("list-experiments").output().unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    let names: Vec<&str> = stdout.lines().collect();
    assert_eq!(
        names,
        vec![
            "fig2-ccdf",
            "micro-tmm",
            "micro-share",
            "monitor-accuracy",
            "vmexit-table",
            "dynamic-vs-fixed"
        ]
    );
}

#[test]
fn validate_accepts_good_and_names_bad_keys() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.json");
    std::fs::write(&good, r#"{"name": "vmexit-table", "seed": 3}"#).unwrap();
    let out = bin().arg("validate").arg(&good).output().unwrap();
    assert!(out.status.success());
    assert_eq!(String::from_utf8(out.stdout).unwrap().trim(), "ok");

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"name": "vmexit-table", "pollicy": {}}"#).unwrap();
    let out = bin().arg("validate").arg(&bad).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8(out.stderr).unwrap().contains("pollicy"));

    let range = dir.path().join("range.json");
    std::fs::write(&range, r#"{"name": "micro-share", "policy": {"f_use": 1.5}}"#).unwrap();
    let out = bin().arg("validate").arg(&range).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8(out.stderr).unwrap().contains("policy.f_use"));
}

#[test]
fn run_missing_config_fails_with_path() {
    let out = bin().arg("run").arg("/nonexistent/config.json").output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8(out.stderr).unwrap().contains("/nonexistent/config.json"));
}

#[test]
fn unknown_subcommand_exits_2_with_usage() {
    let out = bin().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8(out.stderr).unwrap().to_lowercase().contains("usage"));
}

#[test]
fn run_writes_reports_and_seed_override_changes_them() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    std::fs::write(
        &config,
        r#"{"name": "vmexit-table", "seed": 1, "sweep": {"wss_mib": [2]}}"#,
    )
    .unwrap();
    let out_a = dir.path().join("a");
    let status = bin()
        .arg("run")
        .arg(&config)
        .arg("--out")
        .arg(&out_a)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(out_a.join("vmexits.csv").exists());
    assert!(out_a.join("run_manifest.json").exists());

    let out_b = dir.path().join("b");
    let status = bin()
        .arg("run")
        .arg(&config)
        .arg("--seed")
        .arg("2")
        .arg("--out")
        .arg(&out_b)
        .status()
        .unwrap();
    assert!(status.success());
    let manifest_a = std::fs::read_to_string(out_a.join("run_manifest.json")).unwrap();
    let manifest_b = std::fs::read_to_string(out_b.join("run_manifest.json")).unwrap();
    assert!(manifest_a.contains("\"seed\": 1"));
    assert!(manifest_b.contains("\"seed\": 2"));
}

#[test]
fn gen_trace_writes_readable_binary() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    std::fs::write(
        &spec,
        r#"{"wss": 4194304, "pattern": {"kind": "sequential"}, "events": 64, "seed": 5}"#,
    )
    .unwrap();
    let out = dir.path().join("trace.bin");
    let status = bin().arg("gen-trace").arg(&spec).arg(&out).status().unwrap();
    assert!(status.success());
    let bytes = std::fs::read(&out).unwrap();
    assert_eq!(bytes.len(), 16 + 17 * 64);
    assert_eq!(&bytes[..8], b"FHPMTRC\0");
    let events = fhpm_sim::workload::read_trace(bytes.as_slice()).unwrap();
    assert_eq!(events.len(), 64);
    assert!(events.iter().enumerate().all(|(i, e)| e.tick == i as u64));
}
