//! Black-box tests of the `cloudmpc` binary: artifact layout, byte
//! stability, configuration plumbing, and the exit-code contract
//! (0 ok, 2 config error, 3 infeasible cloud start, 4 bound violation).

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_cloudmpc"));
    // Keep the ambient environment from steering output paths; the one test
    // about the variable sets it back explicitly.
    cmd.env_remove("CLOUDMPC_OUT_DIR");
    cmd
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary should spawn")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn run_writes_trace_summary_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "run",
        "--preset",
        "example1_scalar",
        "--mode",
        "fused",
        "--seed",
        "7",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr_of(&out));

    let trace = fs::read_to_string(dir.path().join("trace_fused_seed7.csv")).unwrap();
    let mut lines = trace.lines();
    let header = lines.next().unwrap();
    assert!(header.starts_with("t,x0,u0,w0,stage_cost,eps,delta,trusted"));
    assert!(header.ends_with("oracle_sign,oracle_choice,agreed"));
    // Ten steps, one terminal row, one header.
    assert_eq!(trace.lines().count(), 12);

    let summary = read_json(&dir.path().join("summary_fused_seed7.json"));
    assert_eq!(summary["mode"], "fused");
    assert_eq!(summary["seed"], 7);
    assert_eq!(summary["horizon"], 10);
    assert!(summary["actual_cost"].as_f64().unwrap() > 0.0);
    assert_eq!(summary["switch_pattern"].as_str().unwrap().len(), 10);

    let manifest = read_json(&dir.path().join("manifest.json"));
    let hash = manifest["config_hash"].as_str().unwrap();
    assert_eq!(hash.len(), 64);
    assert!(hash.chars().all(|c| c.is_ascii_hexdigit()));
    let outputs: Vec<&str> = manifest["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap())
        .collect();
    assert!(outputs.contains(&"trace_fused_seed7.csv"));
    assert!(outputs.contains(&"summary_fused_seed7.json"));
}

#[test]
fn reruns_are_byte_identical() {
    let args = |dir: &Path| {
        vec![
            "run".to_string(),
            "--preset".into(),
            "example1_scalar".into(),
            "--mode".into(),
            "all".into(),
            "--seeds".into(),
            "0,1".into(),
            "--out".into(),
            dir.to_str().unwrap().into(),
        ]
    };
    let first = tempfile::tempdir().unwrap();
    let second = tempfile::tempdir().unwrap();
    assert!(bin().args(args(first.path())).output().unwrap().status.success());
    assert!(bin().args(args(second.path())).output().unwrap().status.success());
    let mut names: Vec<String> = fs::read_dir(first.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert!(!names.is_empty());
    for name in names {
        let a = fs::read(first.path().join(&name)).unwrap();
        let b = fs::read(second.path().join(&name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }
}

#[test]
fn mode_all_with_a_seed_range_writes_batch_aggregates() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "run",
        "--preset",
        "example1_scalar",
        "--mode",
        "all",
        "--seeds",
        "0..2",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    let batch = read_json(&dir.path().join("batch.json"));
    assert_eq!(batch["runs"].as_array().unwrap().len(), 9);
    let modes: Vec<&str> = batch["aggregates"]
        .as_array()
        .unwrap()
        .iter()
        .map(|a| a["mode"].as_str().unwrap())
        .collect();
    assert_eq!(modes, ["fused", "cloud_only", "local_only"]);
    for mode in ["fused", "cloud_only", "local_only"] {
        for seed in 0..3 {
            assert!(dir.path().join(format!("trace_{mode}_seed{seed}.csv")).exists());
        }
    }
}

#[test]
fn config_file_and_overrides_flow_into_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("exp.json");
    let out_dir = dir.path().join("artifacts");
    fs::write(
        &cfg_path,
        serde_json::to_string(&serde_json::json!({
            "preset": "example1_scalar",
            "mode": "fused",
            "seed": 3,
            "output_dir": out_dir,
        }))
        .unwrap(),
    )
    .unwrap();
    // No --out: the configuration's output_dir must win, and the override
    // must replace the configured seed before the run plan is built.
    let out = run(&[
        "run",
        "--config",
        cfg_path.to_str().unwrap(),
        "--override",
        "seed=5",
    ]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    assert!(out_dir.join("trace_fused_seed5.csv").exists());
    assert!(!out_dir.join("trace_fused_seed3.csv").exists());
    let manifest = read_json(&out_dir.join("manifest.json"));
    assert_eq!(manifest["seeds"], serde_json::json!([5]));
}

#[test]
fn unknown_configuration_keys_exit_2_and_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("exp.json");
    fs::write(&cfg_path, r#"{"preset": "example1_scalar", "bogus": 1}"#).unwrap();
    let out = run(&["run", "--config", cfg_path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("bogus"), "{}", stderr_of(&out));
}

#[test]
fn unknown_presets_exit_2_and_list_the_alternatives() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "run",
        "--preset",
        "nope",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_of(&out);
    assert!(err.contains("unknown preset"), "{err}");
    assert!(err.contains("example1_scalar"), "{err}");
}

#[test]
fn an_infeasible_cloud_start_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    // A huge initial deviation bound tightens the terminal window to an
    // empty set, so the one-shot cloud problem cannot start the task.
    let out = run(&[
        "run",
        "--preset",
        "example1_scalar",
        "--override",
        "delta0=100",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr_of(&out).contains("infeasible"), "{}", stderr_of(&out));
}

#[test]
fn an_optimistic_disturbance_declaration_fails_the_audit_with_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "verify-bounds",
        "--preset",
        "example1_scalar",
        "--verify-bounds-trials",
        "20",
        "--override",
        "disturbance.omega=0.02",
        "--override",
        "disturbance.declared_omega=0.005",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(4));
    let err = stderr_of(&out);
    assert!(err.contains("violation"), "{err}");
    assert!(err.contains("seed"), "{err}");
    let audit = read_json(&dir.path().join("audit.json"));
    assert!(audit["report"]["violations"].as_u64().unwrap() > 0);
}

#[test]
fn a_clean_audit_exits_0_and_zero_trials_warn() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "verify-bounds",
        "--preset",
        "example1_scalar",
        "--trials",
        "25",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    let audit = read_json(&dir.path().join("audit.json"));
    assert_eq!(audit["report"]["violations"], 0);
    assert_eq!(audit["report"]["trials"], 25);

    let vacuous = run(&[
        "verify-bounds",
        "--preset",
        "example1_scalar",
        "--trials",
        "0",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(vacuous.status.success());
    assert!(
        stderr_of(&vacuous).contains("audits nothing"),
        "{}",
        stderr_of(&vacuous)
    );
}

#[test]
fn the_environment_variable_sets_the_default_output_dir() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["run", "--preset", "example1_scalar", "--seed", "2"])
        .env("CLOUDMPC_OUT_DIR", dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr_of(&out));
    assert!(dir.path().join("trace_fused_seed2.csv").exists());
    assert!(dir.path().join("manifest.json").exists());
}
