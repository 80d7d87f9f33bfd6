//! End-to-end checks of the `powertrack` binary: exit codes, output
//! files, and the documented failure classes.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use powertrack_cli::CliError;

const BIN: &str = env!("CARGO_BIN_EXE_powertrack");
const DEFAULT_CONFIG: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/default.toml");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary spawns")
}

fn temp_path(name: &str) -> PathBuf {
    std::env::temp_dir().join(format!("powertrack-test-{}-{name}", std::process::id()))
}

#[test]
fn simulate_writes_csv_and_exits_zero() {
    let out = temp_path("trace.csv");
    let result = run(&[
        "simulate",
        "--config",
        DEFAULT_CONFIG,
        "--out",
        out.to_str().unwrap(),
        "--epochs",
        "3",
        "--no-oracle",
    ]);
    assert_eq!(result.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&result.stderr));
    let stdout = String::from_utf8_lossy(&result.stdout);
    assert!(stdout.contains("3 epochs"), "summary missing epoch count: {stdout}");
    let csv = std::fs::read_to_string(&out).expect("trace file written");
    assert_eq!(csv.lines().count(), 4, "header plus one row per epoch");
    assert!(csv.starts_with("epoch,"), "header row first");
    std::fs::remove_file(&out).ok();
}

#[test]
fn missing_config_is_a_config_error() {
    let out = temp_path("never.csv");
    let result = run(&[
        "simulate",
        "--config",
        "/nonexistent/powertrack.toml",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(result.status.code(), Some(1));
    assert!(!out.exists(), "no output on config failure");
}

#[test]
fn invalid_config_field_is_a_config_error() {
    let cfg = temp_path("bad.toml");
    let src = std::fs::read_to_string(DEFAULT_CONFIG).expect("default config readable");
    std::fs::write(&cfg, src.replace("alpha = 1.0", "alpha = -1.0")).unwrap();
    let out = temp_path("never2.csv");
    let result = run(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(result.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&result.stderr);
    assert!(stderr.contains("config error"), "stderr: {stderr}");
    std::fs::remove_file(&cfg).ok();
}

#[test]
fn unwritable_output_is_a_runtime_error() {
    let result = run(&[
        "simulate",
        "--config",
        DEFAULT_CONFIG,
        "--out",
        "/nonexistent-dir/trace.csv",
        "--epochs",
        "1",
        "--no-oracle",
    ]);
    assert_eq!(result.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&result.stderr);
    assert!(stderr.contains("runtime error"), "stderr: {stderr}");
}

#[test]
fn bad_flags_exit_one_and_help_exits_zero() {
    assert_eq!(run(&["simulate", "--bogus"]).status.code(), Some(1));
    assert_eq!(run(&[]).status.code(), Some(1), "missing subcommand");
    let help = run(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&help.stdout).contains("simulate"));
    assert_eq!(run(&["--version"]).status.code(), Some(0));
}

#[test]
fn selftest_passes_on_the_shipped_build() {
    let result = run(&["selftest"]);
    let stdout = String::from_utf8_lossy(&result.stdout);
    assert_eq!(result.status.code(), Some(0), "stdout: {stdout}");
    assert!(stdout.contains("ok"), "report lists checks: {stdout}");
    // The failure path reserves its own exit code.
    assert_eq!(CliError::Selftest(2).exit_code(), 3);
}

#[test]
fn oracle_reports_a_reference_solution() {
    let result = run(&["oracle", "--config", DEFAULT_CONFIG, "--epoch", "0"]);
    assert_eq!(result.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&result.stderr));
    let stdout = String::from_utf8_lossy(&result.stdout);
    assert!(stdout.contains("grad norm"), "report shows convergence: {stdout}");
}

#[test]
fn diagnose_runs_the_calibration() {
    let result = run(&["diagnose", "--config", DEFAULT_CONFIG, "--epochs", "6"]);
    assert_eq!(result.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&result.stderr));
    let stdout = String::from_utf8_lossy(&result.stdout);
    assert!(stdout.contains("epoch"), "calibration table present: {stdout}");
}

#[test]
fn seed_override_changes_the_trace() {
    let out_a = temp_path("seed-a.csv");
    let out_b = temp_path("seed-b.csv");
    for (out, seed) in [(&out_a, "1"), (&out_b, "2")] {
        let result = run(&[
            "simulate",
            "--config",
            DEFAULT_CONFIG,
            "--out",
            out.to_str().unwrap(),
            "--epochs",
            "2",
            "--seed",
            seed,
            "--no-oracle",
        ]);
        assert_eq!(result.status.code(), Some(0));
    }
    let a = std::fs::read_to_string(&out_a).unwrap();
    let b = std::fs::read_to_string(&out_b).unwrap();
    assert_ne!(a, b, "different seeds must change the trace");
    std::fs::remove_file(&out_a).ok();
    std::fs::remove_file(&out_b).ok();
}

#[test]
fn quiet_simulate_prints_nothing() {
    let out = temp_path("quiet.csv");
    let result = run(&[
        "simulate",
        "--quiet",
        "--config",
        DEFAULT_CONFIG,
        "--out",
        out.to_str().unwrap(),
        "--epochs",
        "1",
        "--no-oracle",
    ]);
    assert_eq!(result.status.code(), Some(0));
    assert!(result.stdout.is_empty(), "quiet run stays silent");
    assert!(Path::new(&out).exists());
    std::fs::remove_file(&out).ok();
}
