use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dcssp_core::experiment::load_manifest;
use dcssp_core::instance::load_instance;

fn examples() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("examples")
}

fn dcssp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcssp")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn oracle_on_single_device_fixture() {
    let o = dcssp(&["oracle", "--instance", path(&examples().join("t0.json"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), "100");
    let o = dcssp(&["oracle", "--instance", path(&examples().join("t1.json"))]);
    assert_eq!(stdout(&o).trim(), "110");
}

#[test]
fn solve_writes_identical_artifacts_for_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let run = |tag: &str| {
        let files: Vec<PathBuf> = ["tree.dot", "sol.json", "trace.csv"]
            .iter()
            .map(|f| dir.path().join(format!("{tag}-{f}")))
            .collect();
        let o = dcssp(&[
            "solve",
            "--instance",
            path(&examples().join("t1.json")),
            "--iterations",
            "30",
            "--seed",
            "4",
            "--out-tree",
            path(&files[0]),
            "--out-solution",
            path(&files[1]),
            "--out-trace",
            path(&files[2]),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert_eq!(stdout(&o).lines().last(), Some("best_cost=110"));
        files.iter().map(|f| fs::read(f).unwrap()).collect::<Vec<_>>()
    };
    let (a, b) = (run("a"), run("b"));
    assert_eq!(a, b);
    assert!(String::from_utf8_lossy(&a[0]).starts_with("digraph"));
    assert_eq!(String::from_utf8_lossy(&a[2]).lines().count(), 31);
}

#[test]
fn bad_schedule_is_an_input_error() {
    let o = dcssp(&["solve", "--instance", path(&examples().join("t0.json")), "--rho", "2"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("rho out of [0,1] at n=1"), "{}", stderr(&o));
    assert_eq!(stderr(&o).lines().count(), 1);
}

#[test]
fn input_errors_exit_with_one() {
    assert_eq!(dcssp(&["solve", "--instance", "/nonexistent.json"]).status.code(), Some(1));
    assert_eq!(dcssp(&["solve", "--bogus"]).status.code(), Some(1));
    let o = dcssp(&["solve", "--instance", path(&examples().join("t0.json")), "--alpha", "2*"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn unsatisfiable_instance_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(examples().join("t0.json"))
        .unwrap()
        .replace("\"min_loop_reliability\": 0.9", "\"min_loop_reliability\": 1.0");
    let inst = dir.path().join("strict.json");
    fs::write(&inst, text).unwrap();
    let o = dcssp(&["solve", "--instance", path(&inst), "--iterations", "5"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no feasible solution"));
    let o = dcssp(&["oracle", "--instance", path(&inst)]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stdout(&o).trim(), "infeasible");
}

#[test]
fn generated_plc_io_instance_matches_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("plc.json");
    let o = dcssp(&["gen", "--profile", "plc-io", "--a", "50", "--s", "3", "--seed", "1", "--out", path(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let inst = load_instance(&out).unwrap();
    assert_eq!((inst.loops.len(), inst.levels(), inst.devices.len()), (50, 3, 2));
    assert_eq!(
        fs::read(&out).unwrap(),
        fs::read(examples().join("plc_io_a50_s3.json")).unwrap()
    );
    assert!(dcssp(&["validate", "--instance", path(&out)]).status.success());
}

#[test]
fn validate_reports_violations() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(examples().join("t0.json"))
        .unwrap()
        .replace("\"fail_prob\": 0.001", "\"fail_prob\": 1.5");
    let inst = dir.path().join("bad.json");
    fs::write(&inst, text).unwrap();
    let o = dcssp(&["validate", "--instance", path(&inst)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("fail_prob"));
}

#[test]
fn experiment_writes_both_tables() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("m.json");
    fs::write(
        &manifest,
        format!(
            r#"{{"instance": "{}", "runs": 2, "ants": 4, "iterations": 10,
                "sets": [{{"label": "a", "alpha": "2.0", "beta": "1.0", "rho": "0.25"}},
                         {{"label": "b", "alpha": "2/(n + 0.01)", "beta": "0.1n", "rho": "0.25"}}]}}"#,
            path(&examples().join("t1.json"))
        ),
    )
    .unwrap();
    let out = dir.path().join("out");
    let o = dcssp(&["experiment", "--manifest", path(&manifest), "--out-dir", path(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
    assert!(summary.contains("b,0.25,2/(n + 0.01),0.1n,110,110,0"), "{summary}");
    assert_eq!(fs::read_to_string(out.join("convergence.csv")).unwrap().lines().count(), 21);
}

#[test]
fn bundled_manifest_lists_four_sets() {
    let spec = load_manifest(examples().join("schedules.json")).unwrap();
    assert_eq!(spec.sets.len(), 4);
    assert_eq!(spec.runs, 30);
    let labels: Vec<&str> = spec.sets.iter().map(|s| s.label.as_str()).collect();
    assert_eq!(labels, ["1", "2", "3", "4"]);
}
