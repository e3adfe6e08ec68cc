use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL_RUN: &str = r#"{
  "seed": 3,
  "channel": { "kind": "rayleigh", "n_users": 3 },
  "alcor": { "gamma": 1.0, "K": 30 },
  "windows": [ { "demands": [0.4, 0.6, 0.8] }, { "demands": [0.8, 0.4, 0.2], "K": 20 } ]
}"#;

fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn sim(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_alcor-sim"));
    cmd.args(args).env_remove("ALCOR_SIM_THREADS");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

#[test]
fn reruns_write_identical_traces() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "run.json", SMALL_RUN);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for out in [&a, &b] {
        let o = sim(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()], &[]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let trace = fs::read(a.join("trace.csv")).unwrap();
    assert!(!trace.is_empty());
    assert_eq!(trace, fs::read(b.join("trace.csv")).unwrap());
    let lines = String::from_utf8(trace).unwrap().lines().count();
    assert_eq!(lines, 1 + 30 + 20);
}

#[test]
fn thread_cap_does_not_change_results() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "run.json", SMALL_RUN);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    sim(&["run", "--config", cfg.to_str().unwrap(), "--out", a.to_str().unwrap()], &[]);
    let o = sim(
        &["run", "--config", cfg.to_str().unwrap(), "--out", b.to_str().unwrap()],
        &[("ALCOR_SIM_THREADS", "1")],
    );
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read(a.join("trace.csv")).unwrap(), fs::read(b.join("trace.csv")).unwrap());
}

#[test]
fn summary_and_resolved_config_reflect_overrides() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "run.json", SMALL_RUN);
    let out = tmp.path().join("o");
    let o = sim(
        &["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "17", "--ura", "maxpower"],
        &[],
    );
    assert_eq!(code(&o), 0);
    let resolved: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("config.resolved.json")).unwrap()).unwrap();
    assert_eq!(resolved["seed"], 17);
    assert_eq!(resolved["ura"]["kind"], "maxpower");
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["command"], "run");
}

#[test]
fn distributed_mode_matches_centralized_trace() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "run.json", SMALL_RUN);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    sim(&["run", "--config", cfg.to_str().unwrap(), "--out", a.to_str().unwrap()], &[]);
    let o = sim(
        &["run", "--config", cfg.to_str().unwrap(), "--out", b.to_str().unwrap(), "--mode", "distributed"],
        &[],
    );
    assert_eq!(code(&o), 0);
    // The overhead columns differ; everything else must agree.
    let strip = |p: &Path| -> Vec<String> {
        fs::read_to_string(p)
            .unwrap()
            .lines()
            .map(|l| l.rsplitn(3, ',').nth(2).unwrap().to_string())
            .collect()
    };
    assert_eq!(strip(&a.join("trace.csv")), strip(&b.join("trace.csv")));
}

#[test]
fn unknown_key_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(
        tmp.path(),
        "bad.json",
        r#"{"seed": 1, "channel": {"kind": "rayleigh", "n_users": 2}, "colour": "blue"}"#,
    );
    let o = sim(&["run", "--config", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()], &[]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("colour"));
}

#[test]
fn missing_file_and_bad_thread_cap_are_config_errors() {
    let tmp = TempDir::new().unwrap();
    let missing = tmp.path().join("nope.json");
    assert_eq!(code(&sim(&["run", "--config", missing.to_str().unwrap()], &[])), 2);
    let cfg = write(tmp.path(), "run.json", SMALL_RUN);
    let o = sim(&["run", "--config", cfg.to_str().unwrap()], &[("ALCOR_SIM_THREADS", "zero")]);
    assert_eq!(code(&o), 2);
}

#[test]
fn queue_command_needs_a_multicell_channel() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "run.json", SMALL_RUN);
    let o = sim(&["queue", "--config", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()], &[]);
    assert_eq!(code(&o), 2);
}

#[test]
fn overflowing_iterates_abort_with_numerical_status() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(
        tmp.path(),
        "huge.json",
        r#"{"seed": 1, "channel": {"kind": "rayleigh", "n_users": 2},
            "alcor": {"gamma": 1e307, "batch": {"fixed": 2}},
            "windows": [{"demands": [1e307, 1e307]}],
            "rate_study": {"oracle": {"synthetic": {"sigma": 1.0}}, "horizons": [10, 100], "seeds": [1]}}"#,
    );
    let o = sim(&["rate-study", "--config", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()], &[]);
    assert_eq!(code(&o), 3);
}

#[test]
fn require_converged_turns_a_stalled_run_into_status_four() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(
        tmp.path(),
        "hard.json",
        r#"{"seed": 1, "channel": {"kind": "rayleigh", "n_users": 2},
            "alcor": {"K": 5}, "windows": [{"demands": [5.0, 5.0]}]}"#,
    );
    let out = tmp.path().join("o");
    let args = ["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    assert_eq!(code(&sim(&args, &[])), 0);
    let mut strict = args.to_vec();
    strict.push("--require-converged");
    assert_eq!(code(&sim(&strict, &[])), 4);
}

#[test]
fn bench_and_diagnostics_write_their_files() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(
        tmp.path(),
        "bench.json",
        r#"{"seed": 2, "channel": {"kind": "rayleigh", "n_users": 4},
            "windows": [{"demands": [0.5, 0.5, 0.5, 0.5]}],
            "bench": {"kappas": [0.5, 1.0], "draws": 50},
            "diagnostics": {"lipschitz_pairs": 3, "lipschitz_samples": 50, "variance_samples": 200,
                            "variance_batches": 20, "bernoulli_draws": 200}}"#,
    );
    let out = tmp.path().join("o");
    let c = cfg.to_str().unwrap();
    let o = out.to_str().unwrap();
    assert_eq!(code(&sim(&["ura-bench", "--config", c, "--out", o], &[])), 0);
    let csv = fs::read_to_string(out.join("ura_bench.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 2);
    assert_eq!(code(&sim(&["diagnostics", "--config", c, "--out", o], &[])), 0);
    assert!(out.join("diagnostics.json").exists());
}
