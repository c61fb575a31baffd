//! End-to-end tests of the `swingsafe` binary: exit codes, determinism,
//! schema diagnostics, and the dump/solve round trip.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::tempdir;

const CASE4: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../cases/case4.toml");
const CASE39: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../cases/case39_topology.toml");

fn swingsafe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_swingsafe"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

/// Writes a copy of the bundled 4-bus case with a short MPC horizon, so the
/// dumped program stays small.
fn short_horizon_case(dir: &Path) -> PathBuf {
    let src = fs::read_to_string(CASE4).unwrap();
    let patched = src.replace(
        "[scenario]",
        "[controller]\nhorizon_time = 2.0\n\n[scenario]",
    );
    assert_ne!(src, patched);
    let path = dir.join("case4_short.toml");
    fs::write(&path, patched).unwrap();
    path
}

#[test]
fn bundled_bilayered_run_passes_all_audits() {
    let dir = tempdir().unwrap();
    let out = swingsafe(&[
        "run",
        "--case",
        CASE4,
        "--audit",
        "all",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("[PASS] safety"), "{text}");
    assert!(text.contains("[PASS] lyapunov"), "{text}");
    assert!(text.contains("[PASS] invariants"), "{text}");
    assert!(text.contains("[PASS] locality"), "{text}");
    assert!(dir.path().join("trajectory_bilayered.csv").exists());
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("audit_bilayered.json")).unwrap())
            .unwrap();
    assert_eq!(json["pass"], serde_json::Value::Bool(true));
    assert_eq!(json["scenario"]["solver_failures"], 0);
}

#[test]
fn open_loop_safety_violation_sets_exit_code() {
    let dir = tempdir().unwrap();
    let out = swingsafe(&[
        "run",
        "--case",
        CASE4,
        "--mode",
        "open-loop",
        "--audit",
        "safety",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 1);
    assert!(stdout(&out).contains("[FAIL] safety"), "{}", stdout(&out));
}

#[test]
fn trajectory_csvs_are_byte_identical_across_runs() {
    let (da, db) = (tempdir().unwrap(), tempdir().unwrap());
    for dir in [&da, &db] {
        let out = swingsafe(&[
            "run",
            "--case",
            CASE4,
            "--t-end",
            "30",
            "--audit",
            "invariants",
            "--out-dir",
            dir.path().to_str().unwrap(),
        ]);
        assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));
    }
    let a = fs::read(da.path().join("trajectory_bilayered.csv")).unwrap();
    let b = fs::read(db.path().join("trajectory_bilayered.csv")).unwrap();
    assert!(!a.is_empty() && a == b);
}

#[test]
fn compare_of_identical_scenarios_is_identical() {
    let (da, db) = (tempdir().unwrap(), tempdir().unwrap());
    for dir in [&da, &db] {
        let out = swingsafe(&[
            "compare",
            "--case",
            CASE4,
            "--mode-a",
            "bilayered",
            "--mode-b",
            "bilayered",
            "--t-end",
            "30",
            "--out-dir",
            dir.path().to_str().unwrap(),
        ]);
        assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));
    }
    let a = fs::read(da.path().join("compare.json")).unwrap();
    let b = fs::read(db.path().join("compare.json")).unwrap();
    assert!(!a.is_empty() && a == b);
    let json: serde_json::Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(json["a"]["cost"], json["b"]["cost"]);
}

#[test]
fn compare_rejects_a_mismatched_second_case() {
    let dir = tempdir().unwrap();
    let doctored = fs::read_to_string(CASE4)
        .unwrap()
        .replace("injection = 7.0", "injection = 6.0");
    let other = dir.path().join("other.toml");
    fs::write(&other, doctored).unwrap();
    let out = swingsafe(&[
        "compare",
        "--case",
        CASE4,
        "--case-b",
        other.to_str().unwrap(),
        "--t-end",
        "10",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 2);
    assert!(stderr(&out).contains("mismatch"), "{}", stderr(&out));
}

#[test]
fn dump_and_solve_round_trip_agrees_across_backends() {
    let dir = tempdir().unwrap();
    let case = short_horizon_case(dir.path());
    let dump = dir.path().join("qp.txt");
    let out = swingsafe(&[
        "dump-qp",
        "--case",
        case.to_str().unwrap(),
        "--out",
        dump.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));

    let ref_json = dir.path().join("ref.json");
    let dist_json = dir.path().join("dist.json");
    let out = swingsafe(&[
        "solve-qp",
        "--dump",
        dump.to_str().unwrap(),
        "--backend",
        "reference",
        "--out",
        ref_json.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));
    let out = swingsafe(&[
        "solve-qp",
        "--dump",
        dump.to_str().unwrap(),
        "--backend",
        "saddle-distributed",
        "--out",
        dist_json.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));
    assert!(stdout(&out).contains("locality certificate"), "{}", stdout(&out));

    let a: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&ref_json).unwrap()).unwrap();
    let b: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&dist_json).unwrap()).unwrap();
    for field in ["stationarity", "primal_ineq", "primal_eq", "complementarity"] {
        assert!(a["kkt"][field].as_f64().unwrap() <= 1e-8);
    }
    let ya: Vec<f64> = a["y"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    let yb: Vec<f64> = b["y"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert_eq!(ya.len(), yb.len());
    let num = ya.iter().zip(&yb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den = 1.0 + ya.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!(num / den <= 1e-4, "relative gap {}", num / den);
}

#[test]
fn corrupted_dump_is_rejected_with_line_number() {
    let dir = tempdir().unwrap();
    let case = short_horizon_case(dir.path());
    let dump = dir.path().join("qp.txt");
    swingsafe(&[
        "dump-qp",
        "--case",
        case.to_str().unwrap(),
        "--out",
        dump.to_str().unwrap(),
    ]);
    let text = fs::read_to_string(&dump).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    let truncated = lines[..lines.len() * 3 / 5].join("\n");
    fs::write(&dump, truncated).unwrap();
    let out = swingsafe(&["solve-qp", "--dump", dump.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 2);
    assert!(stderr(&out).contains("line"), "{}", stderr(&out));
}

#[test]
fn case_schema_errors_name_the_problem() {
    let dir = tempdir().unwrap();
    let bad_key = fs::read_to_string(CASE4)
        .unwrap()
        .replace("[scenario]\n", "[scenario]\nfrequency = 50.0\n");
    let path = dir.path().join("bad_key.toml");
    fs::write(&path, bad_key).unwrap();
    let out = swingsafe(&["check-case", "--case", path.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 2);
    assert!(stderr(&out).contains("frequency"), "{}", stderr(&out));

    let bad_version = fs::read_to_string(CASE4)
        .unwrap()
        .replace("version = 1", "version = 2");
    let path = dir.path().join("bad_version.toml");
    fs::write(&path, bad_version).unwrap();
    let out = swingsafe(&["check-case", "--case", path.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 2);
    assert!(stderr(&out).contains("version"), "{}", stderr(&out));
}

#[test]
fn check_case_prints_the_disturbance_profile() {
    let dir = tempdir().unwrap();
    let spec_peak = fs::read_to_string(CASE4)
        .unwrap()
        .replace("peak = 0.45", "peak = 0.2");
    let path = dir.path().join("spec_peak.toml");
    fs::write(&path, spec_peak).unwrap();
    let out = swingsafe(&["check-case", "--case", path.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));
    let text = stdout(&out);
    for needle in [
        "delta(25) = 0.200000",
        "delta(75) = 0.200000",
        "delta(137.5) = 0.141421",
        "delta(160) = 0.000000",
        "equilibrium condition",
    ] {
        assert!(text.contains(needle), "missing {needle:?} in:\n{text}");
    }
}

#[test]
fn check_case_accepts_the_39_bus_fixture() {
    let out = swingsafe(&["check-case", "--case", CASE39]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("39 buses"), "{text}");
    assert!(text.contains("case ok"), "{text}");
}

#[test]
fn infeasible_equalities_report_no_convergence() {
    let dir = tempdir().unwrap();
    let case = short_horizon_case(dir.path());
    let dump = dir.path().join("qp.txt");
    swingsafe(&[
        "dump-qp",
        "--case",
        case.to_str().unwrap(),
        "--out",
        dump.to_str().unwrap(),
    ]);

    // Empty out equality row 0 but demand a nonzero right-hand side:
    // 0ᵀY = 1 has no solution.
    let text = fs::read_to_string(&dump).unwrap();
    let mut out_lines: Vec<String> = Vec::new();
    let mut lines = text.lines();
    while let Some(line) = lines.next() {
        if let Some(rest) = line.strip_prefix("matrix r2 ") {
            let parts: Vec<usize> = rest.split_whitespace().map(|p| p.parse().unwrap()).collect();
            let (nrows, ncols, nnz) = (parts[0], parts[1], parts[2]);
            let triplets: Vec<&str> = (0..nnz).map(|_| lines.next().unwrap()).collect();
            let kept: Vec<&str> = triplets
                .iter()
                .copied()
                .filter(|t| t.split_whitespace().next().unwrap() != "0")
                .collect();
            out_lines.push(format!("matrix r2 {nrows} {ncols} {}", kept.len()));
            out_lines.extend(kept.iter().map(|s| s.to_string()));
        } else if let Some(rest) = line.strip_prefix("vector r2_rhs ") {
            let len: usize = rest.trim().parse().unwrap();
            out_lines.push(line.to_string());
            for k in 0..len {
                let v = lines.next().unwrap();
                out_lines.push(if k == 0 { "1.0".to_string() } else { v.to_string() });
            }
        } else {
            out_lines.push(line.to_string());
        }
    }
    fs::write(&dump, out_lines.join("\n")).unwrap();

    let out = swingsafe(&[
        "solve-qp",
        "--dump",
        dump.to_str().unwrap(),
        "--backend",
        "saddle-central",
    ]);
    assert_eq!(exit_code(&out), 1, "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("NO CONVERGENCE"), "{text}");
    assert!(text.contains("residual trace"), "{text}");
}

#[test]
fn out_dir_env_var_is_the_default() {
    let dir = tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_swingsafe"))
        .args([
            "run", "--case", CASE4, "--mode", "open-loop", "--t-end", "10", "--audit",
            "invariants",
        ])
        .env("SWINGSAFE_OUT_DIR", dir.path())
        .output()
        .expect("binary runs");
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));
    assert!(dir.path().join("trajectory_open-loop.csv").exists());
}
