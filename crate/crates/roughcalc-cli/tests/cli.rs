use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_roughcalc"))
}

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(format!("{name}.json"))
}

fn run(config: &Path, out: &Path, extra: &[&str]) -> Output {
    bin().arg("run").arg(config).arg("--out").arg(out).args(extra).output().unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn edit(name: &str, dir: &Path, f: impl FnOnce(&mut Value)) -> PathBuf {
    let mut v: Value = read_json(&scenario(name));
    f(&mut v);
    let p = dir.join(format!("{name}.json"));
    std::fs::write(&p, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    p
}

#[test]
fn list_scenarios_names_every_kind() {
    let out = bin().arg("list-scenarios").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for kind in ["algebraic", "transport", "rsiw", "iag_centering", "kolmogorov", "dminus"] {
        assert!(text.lines().any(|l| l.starts_with(kind)), "{kind} missing from\n{text}");
    }
}

#[test]
fn trivial_transport_exits_zero_with_zero_residuals() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&scenario("transport_trivial"), dir.path(), &[]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report = read_json(&dir.path().join("transport_trivial.json"));
    assert_eq!(report["pass"], true);
    assert!(report["build"].as_str().is_some_and(|b| !b.is_empty()));
    assert_eq!(report["config"]["scenario"]["kind"], "transport");
    assert!(report["report"]["residuals"].as_array().unwrap().iter().all(|r| r.as_f64() == Some(0.0)));
    let csv = std::fs::read_to_string(dir.path().join("transport_trivial.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("mesh,median,p90,order_so_far"));
}

#[test]
fn unknown_key_is_a_configuration_error_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = edit("transport_trivial", dir.path(), |v| {
        v["scenario"]["params"]["lattice"]["spacing"] = 0.1.into();
    });
    let out = run(&cfg, &dir.path().join("out"), &[]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("spacing"), "{err}");
    assert!(!dir.path().join("out").join("transport_trivial.json").exists());
}

#[test]
fn failing_criteria_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = edit("riw_spatial", dir.path(), |v| {
        v["criteria"] = serde_json::json!({ "min_order": 1.5 });
    });
    let out = run(&cfg, &dir.path().join("out"), &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8(out.stdout).unwrap().contains("FAIL"));
    assert_eq!(read_json(&dir.path().join("out").join("riw_spatial.json"))["pass"], false);
}

#[test]
fn divergence_exits_three_naming_the_replica() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = edit("transport_trivial", dir.path(), |v| {
        let p = &mut v["scenario"]["params"];
        p["vf"]["drift"][0]["coeffs"] = serde_json::json!([0.0, 0.0, 0.0, 50.0]);
        p["lattice"] = serde_json::json!({ "lo": 2.0, "hi": 3.0, "resolution": 3 });
    });
    let out = run(&cfg, &dir.path().join("out"), &[]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8(out.stderr).unwrap().contains("replica"));
}

#[test]
fn reports_are_byte_identical_and_seed_flag_applies() {
    let dir = tempfile::tempdir().unwrap();
    let files = ["algebraic.json", "algebraic.csv"];
    let cfg = edit("algebraic", dir.path(), |v| v["scenario"]["params"]["scenarios"] = 10.into());
    for sub in ["a", "b"] {
        assert_eq!(run(&cfg, &dir.path().join(sub), &[]).status.code(), Some(0));
    }
    assert_eq!(run(&cfg, &dir.path().join("c"), &["--seed", "77", "--workers", "1"]).status.code(), Some(0));
    for f in files {
        let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
        assert_eq!(a, std::fs::read(dir.path().join("b").join(f)).unwrap(), "{f}");
        assert_ne!(a, std::fs::read(dir.path().join("c").join(f)).unwrap(), "{f}");
    }
    assert_eq!(read_json(&dir.path().join("c").join("algebraic.json"))["seed"], 77);
}

#[test]
fn fit_rate_reads_study_tables() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("t.csv");
    std::fs::write(&csv, "mesh,median,p90,order_so_far\n0.25,0.0625,0,\n0.125,0.015625,0,2\n0.0625,0.00390625,0,2\n").unwrap();
    let out = bin().arg("fit-rate").arg(&csv).output().unwrap();
    assert!(out.status.success());
    let fit: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!((fit["slope"].as_f64().unwrap() - 2.0).abs() < 1e-12);
    std::fs::write(&csv, "h,err\n1,1\n").unwrap();
    assert_eq!(bin().arg("fit-rate").arg(&csv).output().unwrap().status.code(), Some(2));
}

#[test]
fn kolmogorov_refits_saved_samples() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = edit("kolmogorov_brownian", dir.path(), |v| {
        let p = &mut v["scenario"]["params"];
        p["samples"] = 200.into();
        p["steps"] = 64.into();
        p["save_samples"] = true.into();
        p["min_exponent"] = 0.4.into();
        p["max_exponent"] = 0.6.into();
    });
    let out_dir = dir.path().join("out");
    assert_eq!(run(&cfg, &out_dir, &[]).status.code(), Some(0));
    let stored = read_json(&out_dir.join("kolmogorov_brownian.json"))["report"]["fit"]["exponent"].as_f64().unwrap();
    let out = bin()
        .arg("kolmogorov")
        .arg(out_dir.join("kolmogorov_brownian_samples"))
        .args(["--level", "1", "--q", "4"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let fit: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(fit["exponent"].as_f64().unwrap(), stored);
    assert_eq!(fit["samples"], 200);
}
