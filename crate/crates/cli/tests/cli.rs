use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn workdir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("metaspec-cli-{}-{name}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_metaspec")).current_dir(dir).args(args).env_remove("METASPEC_JOBS").output().unwrap()
}

fn report(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stderr)))
}

fn build(dir: &Path, spec: &str, out: &str) {
    std::fs::write(dir.join("spec.json"), spec).unwrap();
    let o = run(dir, &["build", "--spec", "spec.json", "--out", out]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn analyze_finds_both_wells() {
    let dir = workdir("analyze");
    build(&dir, r#"{"d":1,"N":16,"preset":"double_well"}"#, "dw.json");
    let o = run(&dir, &["analyze", "--chain", "dw.json", "--auto", "2", "--csv-dir", "csv"]);
    assert!(matches!(o.status.code(), Some(0 | 2)));
    let r = report(&o);
    assert_eq!(r["command"], "analyze");
    assert_eq!(r["result"]["hierarchy"]["points"].as_array().unwrap().len(), 2);
    assert_eq!(r["inputs"]["dw.json"].as_str().unwrap().len(), 64);
    assert!(dir.join("csv/capacity.csv").exists());
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn verify_is_byte_identical_across_runs_and_thread_counts() {
    let dir = workdir("determinism");
    build(&dir, r#"{"d":1,"N":16,"preset":"double_well"}"#, "dw.json");
    let args = ["verify", "--chain", "dw.json", "--mc", "500", "--seed", "9"];
    let one = run(&dir, &[&["--jobs", "1"], &args[..]].concat());
    let four = run(&dir, &[&["--jobs", "4"], &args[..]].concat());
    let again = run(&dir, &[&["--jobs", "4"], &args[..]].concat());
    assert!(!one.stdout.is_empty());
    assert_eq!(one.stdout, four.stdout);
    assert_eq!(four.stdout, again.stdout);
    assert_eq!(one.status.code(), four.status.code());
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn spectrum_checks_triple_well_hierarchy() {
    let dir = workdir("spectrum");
    build(&dir, r#"{"d":1,"N":64,"preset":"triple_well"}"#, "tw.json");
    let o = run(&dir, &["analyze", "--chain", "tw.json", "--auto", "3", "--report", "analysis.json"]);
    assert!(matches!(o.status.code(), Some(0 | 2)));
    let o = run(&dir, &["spectrum", "--chain", "tw.json", "--verify", "analysis.json", "--csv-dir", "csv"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let r = report(&o);
    let spectrum = &r["result"]["spectrum"];
    assert_eq!(spectrum["count_below_gap"], 3);
    assert_eq!(spectrum["pairing"].as_array().unwrap().len(), 3);
    for (name, c) in r["result"]["checks"].as_object().unwrap() {
        assert_eq!(c["pass"], true, "{name}");
    }
    assert!(dir.join("csv/det.csv").exists());
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn two_state_chain_meets_the_eigenvalue_time_bound_with_equality() {
    let dir = workdir("two-state");
    std::fs::write(dir.join("two.json"), r#"{"P":[[0.8,0.2],[0.3,0.7]]}"#).unwrap();
    let o = run(&dir, &["verify", "--chain", "two.json"]);
    let r = report(&o);
    let dv = &r["result"]["verify"]["checks"]["donsker-varadhan-bound"];
    assert_eq!(dv["status"], "pass");
    assert!((dv["value"].as_f64().unwrap() - 1.0).abs() < 1e-12);

    let o = run(&dir, &["exitlaw", "--chain", "two.json", "--from", "1", "--target", "0", "--csv-dir", "csv"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let r = report(&o);
    let residue = r["result"]["residues"]["residues"][0]["residue"].as_f64().unwrap();
    assert!((residue + 1.0).abs() < 1e-14);
    assert!(dir.join("csv/survival.csv").exists());

    let o = run(&dir, &["hit", "--chain", "two.json", "--target", "0", "--mean"]);
    let r = report(&o);
    assert!((r["result"]["mean"]["values"][1].as_f64().unwrap() - 1.0 / 0.3).abs() < 1e-12);
    std::fs::remove_dir_all(&dir).unwrap();
}

fn error_of(out: &Output) -> Value {
    assert!(out.stdout.is_empty());
    let v: Value = serde_json::from_slice(&out.stderr).unwrap();
    v["error"].clone()
}

#[test]
fn failures_exit_with_their_class_codes() {
    let dir = workdir("errors");
    std::fs::write(dir.join("bad.json"), r#"{"P":[[0.8,0.1],[0.3,0.7]]}"#).unwrap();
    let o = run(&dir, &["verify", "--chain", "bad.json"]);
    assert_eq!(o.status.code(), Some(5));
    assert_eq!(error_of(&o)["kind"], "invariant");

    let o = run(&dir, &["verify", "--chain", "missing.json"]);
    assert_eq!(o.status.code(), Some(4));
    assert_eq!(error_of(&o)["kind"], "input");

    let o = run(&dir, &["verify", "--bogus"]);
    assert_eq!(o.status.code(), Some(4));

    std::fs::write(dir.join("two.json"), r#"{"P":[[0.8,0.2],[0.3,0.7]]}"#).unwrap();
    let o = run(&dir, &["--tol", "nonsense=1", "verify", "--chain", "two.json"]);
    assert_eq!(o.status.code(), Some(4));
    let o = run(&dir, &["hit", "--chain", "two.json", "--target", "0", "--u", "5"]);
    assert_eq!(o.status.code(), Some(7));
    assert_eq!(error_of(&o)["exit_code"], 7);
    std::fs::remove_dir_all(&dir).unwrap();
}
