use std::path::Path;
use std::process::{Command, Output};

fn marginsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_marginsim"))
        .args(args)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn run_then_analyze() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = marginsim(&[
        "run",
        "--set",
        "T=3000",
        "--set",
        "funds[*].lambda_max=10",
        "--seed",
        "7",
        "--out",
        p(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in [
        "timeseries.csv",
        "events.csv",
        "summary.json",
        "manifest.json",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
    let before = std::fs::read(out.join("summary.json")).unwrap();
    let o = marginsim(&["analyze", "--in", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read(out.join("summary.json")).unwrap(), before);
}

#[test]
fn config_file_and_override_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"sigma": 0.02, "T": 50, "funds": []}"#).unwrap();
    let out = dir.path().join("r");
    let o = marginsim(&[
        "run",
        "--config",
        p(&cfg),
        "--set",
        "sigma=0.035",
        "--compact",
        "--out",
        p(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["config"]["sigma"], 0.035);
    assert_eq!(m["config"]["T"], 50);
    assert!(!out.join("timeseries.csv").exists());
}

#[test]
fn errors_are_one_line_with_category() {
    let o = marginsim(&["run", "--set", "funds[0].lambda_max=0.5"]);
    assert!(!o.status.success());
    let e = stderr(&o);
    assert_eq!(e.lines().count(), 1);
    assert!(e.starts_with("error[config]: funds[0].lambda_max"), "{e}");

    let o = marginsim(&["run", "--set", "sigmaa=1"]);
    assert!(stderr(&o).starts_with("error[config]"), "{}", stderr(&o));

    let o = marginsim(&["scenario", "fig99"]);
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("error[unknown_scenario]"));
    assert!(stderr(&o).contains("fig7_evolution"));

    let o = marginsim(&["analyze", "--in", "/nonexistent/dir"]);
    assert!(stderr(&o).starts_with("error[io]"), "{}", stderr(&o));

    let o = marginsim(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error[usage]"));
}

#[test]
fn list_scenarios_names_all() {
    let o = marginsim(&["list-scenarios"]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    assert_eq!(text.lines().count(), 8);
    assert!(text.lines().any(|l| l.starts_with("fig5_derivatives\t")));
}

#[test]
fn sweep_writes_tables() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sw");
    let o = marginsim(&[
        "sweep",
        "--set",
        "T=1000",
        "--param",
        "funds[*].lambda_max",
        "--values",
        "1,5",
        "--seeds",
        "2",
        "--jobs",
        "2",
        "--out",
        p(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let runs = std::fs::read_to_string(out.join("sweep_runs.csv")).unwrap();
    assert_eq!(runs.lines().count(), 1 + 4);
    let agg = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(agg.lines().count(), 1 + 2);
    assert!(agg.starts_with("value,runs,failed,gamma_neg_mean"));
}

#[test]
fn chi_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let chi = dir.path().join("chi.txt");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let o = marginsim(&[
        "run",
        "--set",
        "T=500",
        "--seed",
        "3",
        "--out",
        p(&a),
        "--chi-out",
        p(&chi),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(&chi).unwrap().lines().count(), 500);
    let o = marginsim(&[
        "run",
        "--set",
        "T=500",
        "--seed",
        "99",
        "--out",
        p(&b),
        "--chi-in",
        p(&chi),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        std::fs::read(a.join("timeseries.csv")).unwrap(),
        std::fs::read(b.join("timeseries.csv")).unwrap()
    );
    let o = marginsim(&["run", "--set", "T=501", "--out", p(&b), "--chi-in", p(&chi)]);
    assert!(stderr(&o).starts_with("error[invalid_input]"));
}

#[test]
fn scenario_and_manifest_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let o = marginsim(&[
        "scenario",
        "fig3c_gamma_sweep",
        "--seeds",
        "1",
        "--steps",
        "500",
        "--out",
        p(&a),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = a.join("fig3c_gamma_sweep/tables/gamma_sweep.csv");
    assert_eq!(std::fs::read_to_string(&table).unwrap().lines().count(), 16);
    let manifest = a.join("fig3c_gamma_sweep/manifest.json");
    let o = marginsim(&["scenario", "--manifest", p(&manifest), "--out", p(&b)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        std::fs::read(&table).unwrap(),
        std::fs::read(b.join("fig3c_gamma_sweep/tables/gamma_sweep.csv")).unwrap()
    );
}
