//! End-to-end tests of the command-line interface, exercising the staged
//! workflow, the single-shot two-pass command, and the exit-code contract.

use std::path::Path;
use std::process::{Command, Output};

fn lfalloc(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lfalloc"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_ok(dir: &Path, args: &[&str]) -> String {
    let out = lfalloc(dir, args);
    assert!(
        out.status.success(),
        "command {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn exit_code(dir: &Path, args: &[&str]) -> i32 {
    lfalloc(dir, args).status.code().unwrap()
}

#[test]
fn staged_workflow_matches_twopass() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    run_ok(d, &[
        "mockgen", "--frames", "64", "--profile", "ai", "--seed", "5",
        "--sigma", "0", "--out", "scene.json",
    ]);
    run_ok(d, &[
        "firstpass", "--backend", "mock", "--scene", "scene.json",
        "--profile", "ai", "--out", "stats.csv",
    ]);
    run_ok(d, &[
        "fit", "--stats", "stats.csv", "--frames", "64", "--profile", "ai",
        "--budget", "3840000", "--out", "fit.json",
    ]);
    run_ok(d, &[
        "allocate", "--models", "fit.json", "--rows", "8", "--cols", "8",
        "--profile", "ai", "--lambda", "2", "--budget", "3840000",
        "--stats", "stats.csv", "--schedule-out", "staged.csv",
        "--out", "alloc.json",
    ]);
    run_ok(d, &[
        "twopass", "--backend", "mock", "--scene", "scene.json",
        "--rows", "8", "--cols", "8", "--profile", "ai", "--lambda", "2",
        "--budget", "3840000", "--out", "report.json",
        "--schedule-out", "direct.csv",
    ]);
    // The staged pipeline and the single-shot command plan the same QPs.
    let staged = std::fs::read_to_string(d.join("staged.csv")).unwrap();
    let direct = std::fs::read_to_string(d.join("direct.csv")).unwrap();
    assert_eq!(staged, direct);

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("report.json")).unwrap()).unwrap();
    let bit_error = report["bit_error"].as_f64().unwrap();
    assert!(bit_error.abs() < 0.02, "bit error {bit_error}");
    assert!(report["quality"]["T_prime_db"].as_f64().is_some());
}

#[test]
fn twopass_is_deterministic_and_cache_safe() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    run_ok(d, &[
        "mockgen", "--frames", "16", "--profile", "ai", "--seed", "9",
        "--out", "scene.json",
    ]);
    let base = [
        "twopass", "--backend", "mock", "--scene", "scene.json",
        "--rows", "4", "--cols", "4", "--profile", "ai", "--lambda", "2",
        "--budget", "960000", "--cache-dir", "cache",
    ];
    let mut cold = base.to_vec();
    cold.extend(["--out", "a.json", "--schedule-out", "a.csv"]);
    run_ok(d, &cold);
    let mut warm = base.to_vec();
    warm.extend(["--out", "b.json", "--schedule-out", "b.csv"]);
    run_ok(d, &warm);
    assert_eq!(
        std::fs::read_to_string(d.join("a.csv")).unwrap(),
        std::fs::read_to_string(d.join("b.csv")).unwrap()
    );
    let strip = |name: &str| -> serde_json::Value {
        let mut v: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(d.join(name)).unwrap()).unwrap();
        v.as_object_mut().unwrap().remove("timing");
        v.as_object_mut().unwrap().remove("first_pass_from_cache");
        v
    };
    assert_eq!(strip("a.json"), strip("b.json"));
}

#[test]
fn gop_profile_via_cli() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    run_ok(d, &[
        "mockgen", "--frames", "24", "--profile", "ra", "--seed", "3",
        "--sigma", "0", "--out", "scene.json",
    ]);
    run_ok(d, &[
        "twopass", "--backend", "mock", "--scene", "scene.json",
        "--rows", "4", "--cols", "6", "--profile", "ra", "--lambda", "0",
        "--budget", "1440000", "--out", "report.json",
    ]);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("report.json")).unwrap()).unwrap();
    // 24 frames / GOP 8 -> 3 allocation variables.
    assert_eq!(report["allocation"]["allocation"].as_array().unwrap().len(), 3);
}

#[test]
fn compare_reports_negative_bd_rate_for_optimizer() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    // Heterogeneous scene so optimization beats the uniform split.
    run_ok(d, &[
        "mockgen", "--frames", "64", "--profile", "ai", "--seed", "55",
        "--sigma", "0", "--alpha-lo", "1e7", "--alpha-hi", "1e9",
        "--rate-lo", "3e4", "--rate-hi", "1.5e5", "--out", "scene.json",
    ]);
    let mut optimized = Vec::new();
    let mut baseline = Vec::new();
    for (i, budget) in ["2240000", "4480000", "8960000", "17920000"].iter().enumerate() {
        let opt = format!("opt{i}.json");
        let base = format!("base{i}.json");
        run_ok(d, &[
            "twopass", "--backend", "mock", "--scene", "scene.json",
            "--rows", "8", "--cols", "8", "--profile", "ai", "--lambda", "0",
            "--budget", budget, "--cache-dir", "cache", "--out", &opt,
        ]);
        run_ok(d, &[
            "twopass", "--backend", "mock", "--scene", "scene.json",
            "--rows", "8", "--cols", "8", "--profile", "ai", "--lambda", "0",
            "--budget", budget, "--cache-dir", "cache", "--uniform",
            "--out", &base,
        ]);
        let load = |name: &str| -> serde_json::Value {
            serde_json::from_str(&std::fs::read_to_string(d.join(name)).unwrap()).unwrap()
        };
        optimized.push(load(&opt));
        baseline.push(load(&base));
    }
    std::fs::write(d.join("optimized.json"), serde_json::to_string(&optimized).unwrap()).unwrap();
    std::fs::write(d.join("baseline.json"), serde_json::to_string(&baseline).unwrap()).unwrap();
    let out = run_ok(d, &[
        "compare", "--anchor", "baseline.json", "--test", "optimized.json",
    ]);
    let comparison: serde_json::Value = serde_json::from_str(&out).unwrap();
    let bd = comparison["bd_rate_percent"].as_f64().unwrap();
    assert!(bd < 0.0, "BD-rate {bd}");
}

#[test]
fn bdrate_command_on_shifted_curve() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("anchor.csv"), "1e6,32\n2e6,36\n4e6,40\n8e6,44\n").unwrap();
    std::fs::write(d.join("test.csv"), "9e5,32\n1.8e6,36\n3.6e6,40\n7.2e6,44\n").unwrap();
    let out = run_ok(d, &["bdrate", "--anchor", "anchor.csv", "--test", "test.csv"]);
    let bd: f64 = out.trim().parse().unwrap();
    assert!((bd + 10.0).abs() < 0.1, "BD-rate {bd}");
}

#[test]
fn metrics_command_reports_quality() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("mse.csv"), "10,12,11\n9,8,10\n11,10,9\n").unwrap();
    let out = run_ok(d, &["metrics", "--mse", "mse.csv", "--lambda", "2"]);
    let report: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert!(report["wmse"].as_f64().unwrap() > 0.0);
    assert!(report["T"].as_f64().unwrap() > report["wmse"].as_f64().unwrap());
    assert!(report["T_prime_db"].as_f64().is_some());
}

#[test]
fn exit_codes_follow_error_classes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    // Unknown backend: invalid input.
    assert_eq!(
        exit_code(d, &[
            "twopass", "--backend", "nope", "--rows", "2", "--cols", "2",
            "--budget", "1000",
        ]),
        2
    );
    // Missing scene file: I/O.
    assert_eq!(
        exit_code(d, &[
            "twopass", "--backend", "mock", "--scene", "missing.json",
            "--rows", "2", "--cols", "2", "--budget", "1000",
        ]),
        3
    );
    // Mock backend without a scene: invalid input.
    assert_eq!(
        exit_code(d, &[
            "firstpass", "--backend", "mock", "--profile", "ai",
        ]),
        2
    );
    // External backend that fails at startup: backend class.
    assert_eq!(
        exit_code(d, &[
            "firstpass", "--backend", "external", "--exec", "/nonexistent/encoder {statsfile}",
            "--input", "in.yuv", "--frames", "2",
        ]),
        4
    );
    // Curve with too few points: invalid input.
    std::fs::write(d.join("short.csv"), "1e6,32\n2e6,36\n").unwrap();
    assert_eq!(
        exit_code(d, &["bdrate", "--anchor", "short.csv", "--test", "short.csv"]),
        2
    );
    // Malformed curve file: parse class.
    std::fs::write(d.join("bad.csv"), "1e6,32\nnot-a-number,36\n3e6,40\n4e6,44\n").unwrap();
    assert_eq!(
        exit_code(d, &["bdrate", "--anchor", "bad.csv", "--test", "bad.csv"]),
        3
    );
}
