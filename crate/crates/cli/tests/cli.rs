use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_nuisance"));
    c.env_remove("NUISANCE_ADJUST_WORKERS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn run_ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn out_dir(tmp: &tempfile::TempDir, name: &str) -> PathBuf {
    tmp.path().join(name)
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn canonical(p: &Path) -> String {
    let mut v = read_json(p);
    nuisance_core::harness::strip_wall_time(&mut v);
    serde_json::to_string(&v).unwrap()
}

fn schema_validator() -> jsonschema::Validator {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../schemas/report.schema.json");
    jsonschema::validator_for(&read_json(&path)).expect("schema compiles")
}

fn assert_valid(report: &Path) {
    let v = read_json(report);
    let validator = schema_validator();
    let errors: Vec<String> = validator.iter_errors(&v).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{}: {errors:?}", report.display());
}

#[test]
fn coverage_twice_gives_identical_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (out_dir(&tmp, "a"), out_dir(&tmp, "b"));
    for d in [&a, &b] {
        run_ok(&["coverage", "--experiment", "expreg", "--reps", "50", "--seed", "7", "--out", d.to_str().unwrap()]);
    }
    assert_eq!(canonical(&a.join("report.json")), canonical(&b.join("report.json")));
    assert_eq!(
        std::fs::read(a.join("summary.csv")).unwrap(),
        std::fs::read(b.join("summary.csv")).unwrap()
    );
    assert_eq!(
        std::fs::read(a.join("coverage_median_replication.svg")).unwrap(),
        std::fs::read(b.join("coverage_median_replication.svg")).unwrap()
    );
    assert_valid(&a.join("report.json"));
}

#[test]
fn worker_cap_does_not_change_results() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (out_dir(&tmp, "a"), out_dir(&tmp, "b"));
    let args = |d: &Path| {
        vec![
            "coverage".to_string(),
            "--reps".into(),
            "30".into(),
            "--seed".into(),
            "3".into(),
            "--out".into(),
            d.to_str().unwrap().into(),
        ]
    };
    let s1 = bin().args(args(&a)).env("NUISANCE_ADJUST_WORKERS", "1").status().unwrap();
    let s2 = bin().args(args(&b)).env("NUISANCE_ADJUST_WORKERS", "3").status().unwrap();
    assert!(s1.success() && s2.success());
    assert_eq!(canonical(&a.join("report.json")), canonical(&b.join("report.json")));
}

#[test]
fn ellipse_unit_covariance_closed_form() {
    let tmp = tempfile::tempdir().unwrap();
    let d = out_dir(&tmp, "e");
    run_ok(&["ellipse", "--cov", "1,0,0,1", "--center", "0,0", "--level", "0.9", "--out", d.to_str().unwrap()]);
    let v = read_json(&d.join("report.json"));
    let r2 = v["result"]["ellipse"]["radius2"].as_f64().unwrap();
    assert!((r2 - 4.60517).abs() < 1e-5);
    let svg = std::fs::read_to_string(d.join("ellipse.svg")).unwrap();
    let grab = |name: &str| {
        let key = format!(" {name}=\"");
        let i = svg.find(&key).unwrap() + key.len();
        svg[i..i + svg[i..].find('"').unwrap()].to_string()
    };
    assert_eq!(grab("rx"), grab("ry"));
    assert_valid(&d.join("report.json"));
}

#[test]
fn negative_center_values_parse() {
    let tmp = tempfile::tempdir().unwrap();
    let d = out_dir(&tmp, "e");
    run_ok(&["ellipse", "--cov", "2,-0.5,-0.5,1", "--center", "-1,-2", "--out", d.to_str().unwrap()]);
    let v = read_json(&d.join("report.json"));
    assert_eq!(v["result"]["ellipse"]["center"][0].as_f64(), Some(-1.0));
}

#[test]
fn missing_input_exits_2_naming_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.csv");
    let out = run(&[
        "ingest",
        "--input",
        missing.to_str().unwrap(),
        "--out",
        out_dir(&tmp, "o").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains(missing.to_str().unwrap()));
}

#[test]
fn unknown_flag_exits_2() {
    assert_eq!(run(&["coverage", "--bogus"]).status.code(), Some(2));
    assert_eq!(run(&["no-such-command"]).status.code(), Some(2));
}

#[test]
fn bad_level_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["ellipse", "--cov", "1,0,0,1", "--center", "0,0", "--level", "1.5", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn singular_covariance_exits_1() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["ellipse", "--cov", "0,0,0,0", "--center", "0,0", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn series_ingest_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("rv.csv");
    std::fs::write(&src, "date,value\n2020-01-01,0.5\n2020-01-02,1.25\n2020-01-03,2.0\n2020-01-04,0.75\n").unwrap();
    let first = out_dir(&tmp, "first");
    run_ok(&["ingest", "--input", src.to_str().unwrap(), "--log", "--demean", "--out", first.to_str().unwrap()]);
    let second = out_dir(&tmp, "second");
    let ingested = first.join("ingested.csv");
    run_ok(&["ingest", "--input", ingested.to_str().unwrap(), "--out", second.to_str().unwrap()]);
    assert_eq!(
        std::fs::read_to_string(&ingested).unwrap(),
        std::fs::read_to_string(second.join("ingested.csv")).unwrap()
    );
    let text = std::fs::read_to_string(&ingested).unwrap();
    let vals: Vec<f64> = text.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert!(vals.iter().sum::<f64>().abs() < 1e-12);
    assert!(text.starts_with("date,value\n2020-01-01,"));
    assert_valid(&first.join("report.json"));
}

#[test]
fn log_of_nonpositive_value_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("bad.csv");
    std::fs::write(&src, "value\n1\n-2\n").unwrap();
    let out = run(&["ingest", "--input", src.to_str().unwrap(), "--log", "--out", out_dir(&tmp, "o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));
}

#[test]
fn simulate_then_adjust_expreg() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = out_dir(&tmp, "sim");
    run_ok(&["simulate", "--model", "expreg", "--seed", "1", "--out", sim.to_str().unwrap()]);
    let adj = out_dir(&tmp, "adj");
    run_ok(&[
        "adjust",
        "--model",
        "expreg",
        "--primary",
        sim.join("sample_a.csv").to_str().unwrap(),
        "--nuisance",
        sim.join("sample_b.csv").to_str().unwrap(),
        "--out",
        adj.to_str().unwrap(),
    ]);
    let v = read_json(&adj.join("report.json"));
    assert!(v["result"]["inflation_min_eigenvalue"].as_f64().unwrap() >= -1e-12);
    assert_eq!(v["result"]["ellipses"].as_array().unwrap().len(), 4);
    assert!(adj.join("adjust.svg").exists());
    assert_valid(&adj.join("report.json"));
    assert_valid(&sim.join("report.json"));

    let fit = out_dir(&tmp, "fit");
    run_ok(&["fit", "--model", "expreg", "--input", sim.join("sample_a.csv").to_str().unwrap(), "--out", fit.to_str().unwrap()]);
    let b2 = read_json(&fit.join("report.json"))["result"]["params"]["b2"].as_f64().unwrap();
    assert!((b2 - 0.8).abs() < 0.15);
}

#[test]
fn simulate_then_adjust_garch_with_transforms() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = out_dir(&tmp, "sim");
    run_ok(&["simulate", "--model", "garch", "--n", "1500", "--m", "1500", "--seed", "2", "--out", sim.to_str().unwrap()]);
    let adj = out_dir(&tmp, "adj");
    run_ok(&[
        "adjust",
        "--model",
        "garch",
        "--demean",
        "--primary",
        sim.join("series_primary.csv").to_str().unwrap(),
        "--nuisance",
        sim.join("series_nuisance.csv").to_str().unwrap(),
        "--out",
        adj.to_str().unwrap(),
    ]);
    let v = read_json(&adj.join("report.json"));
    assert!(v["result"]["area_ratio"].as_f64().unwrap() >= 1.0);
    assert!(v["result"]["primary_removed_mean"].is_number());
    assert_valid(&adj.join("report.json"));
}

#[test]
fn garch_pipeline_writes_one_figure_per_case() {
    let tmp = tempfile::tempdir().unwrap();
    let d = out_dir(&tmp, "g");
    let out = run_ok(&["garch-pipeline", "--reps", "5", "--seed", "4", "--out", d.to_str().unwrap()]);
    let listed = String::from_utf8_lossy(&out.stdout).to_string();
    for f in ["report.json", "summary.csv", "garch_rel_error_005.svg", "garch_rel_error_030.svg"] {
        assert!(d.join(f).exists(), "{f} missing");
        assert!(listed.contains(f));
    }
    let v = read_json(&d.join("report.json"));
    assert_eq!(v["result"]["cases"][1]["coverage"]["replications"].as_u64(), Some(5));
    assert_valid(&d.join("report.json"));
}

#[test]
fn config_file_values_yield_to_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    std::fs::write(&cfg, "seed = 3\nreps = 12\nlevel = 0.8\n").unwrap();
    let d = out_dir(&tmp, "c");
    run_ok(&["coverage", "--config", cfg.to_str().unwrap(), "--seed", "4", "--out", d.to_str().unwrap()]);
    let v = read_json(&d.join("report.json"));
    assert_eq!(v["seed"].as_u64(), Some(4));
    assert_eq!(v["level"].as_f64(), Some(0.8));
    assert_eq!(v["result"]["config"]["replications"].as_u64(), Some(12));
}

#[test]
fn unknown_config_key_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "replications = 3\n").unwrap();
    let out = run(&["coverage", "--config", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.toml"));
}

#[test]
fn synthetic_nn_study_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let d = out_dir(&tmp, "nn");
    run_ok(&[
        "nn-study",
        "--synthetic",
        "--seeds",
        "0",
        "--depths",
        "1,2",
        "--hidden",
        "6",
        "--epochs",
        "3",
        "--paper-quantile",
        "--out",
        d.to_str().unwrap(),
    ]);
    let v = read_json(&d.join("report.json"));
    assert_eq!(v["result"]["runs"].as_array().unwrap().len(), 2);
    assert_eq!(v["result"]["config"]["quantile_rule"], "fixed-upper025");
    for f in ["summary.csv", "intervals.csv", "nn_weights_depth1.svg", "nn_weights_depth2.svg"] {
        assert!(d.join(f).exists(), "{f} missing");
    }
    assert_valid(&d.join("report.json"));
}

#[test]
fn nothing_is_written_outside_the_output_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let work = tmp.path().join("work");
    std::fs::create_dir(&work).unwrap();
    let status = bin()
        .current_dir(&work)
        .args(["ellipse", "--cov", "1,0,0,2", "--center", "0,0", "--out", "res"])
        .status()
        .unwrap();
    assert!(status.success());
    let entries: Vec<_> = std::fs::read_dir(&work).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(entries, vec![std::ffi::OsString::from("res")]);
}
