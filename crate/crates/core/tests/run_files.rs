use marginsim_core::config::standard_roster;
use marginsim_core::engine::{run, EventKind};
use marginsim_core::io::{
    self, emit_run, load_config, read_run, EVENTS_FILE, MANIFEST_FILE, SUMMARY_FILE,
    TIMESERIES_FILE,
};
use marginsim_core::ModelConfig;

fn levered(steps: u64, seed: u64) -> ModelConfig {
    ModelConfig::default()
        .with_funds(standard_roster(10.0))
        .with_horizon(steps)
        .with_seed(seed)
}

#[test]
fn manifest_reproduces_timeseries_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let a = run(&levered(5000, 2)).unwrap();
    emit_run(&a, &dir.path().join("a"), false).unwrap();

    let cfg = load_config(Some(&dir.path().join("a").join(MANIFEST_FILE)), &[]).unwrap();
    assert_eq!(cfg, a.config);
    emit_run(&run(&cfg).unwrap(), &dir.path().join("b"), false).unwrap();
    for f in [TIMESERIES_FILE, EVENTS_FILE, SUMMARY_FILE, MANIFEST_FILE] {
        assert_eq!(
            std::fs::read(dir.path().join("a").join(f)).unwrap(),
            std::fs::read(dir.path().join("b").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn analyze_recomputes_identical_summary() {
    let dir = tempfile::tempdir().unwrap();
    let a = run(&levered(20_000, 4)).unwrap();
    assert!(a.summary.default_count > 0);
    emit_run(&a, dir.path(), false).unwrap();
    let before = std::fs::read(dir.path().join(SUMMARY_FILE)).unwrap();
    let s = io::analyze(dir.path()).unwrap();
    assert_eq!(s, a.summary);
    assert_eq!(
        std::fs::read(dir.path().join(SUMMARY_FILE)).unwrap(),
        before
    );
}

#[test]
fn read_back_matches_records() {
    let dir = tempfile::tempdir().unwrap();
    let a = run(&levered(3000, 5)).unwrap();
    emit_run(&a, dir.path(), false).unwrap();
    let (cfg, recs) = read_run(dir.path()).unwrap();
    assert_eq!(cfg, a.config);
    assert_eq!(recs.len(), a.records.len());
    for (x, y) in recs.iter().zip(&a.records) {
        assert_eq!(x.price.to_bits(), y.price.to_bits());
        for (f, g) in x.funds.iter().zip(&y.funds) {
            assert_eq!(f.wealth.to_bits(), g.wealth.to_bits());
            assert_eq!(f.ret.to_bits(), g.ret.to_bits());
            assert_eq!(f.r_perf.to_bits(), g.r_perf.to_bits());
            assert_eq!(f.defaulted, g.defaulted);
            assert_eq!(f.margin_call, g.margin_call);
        }
    }
}

#[test]
fn csv_shape_and_event_rows() {
    let dir = tempfile::tempdir().unwrap();
    let a = run(&levered(20_000, 4)).unwrap();
    emit_run(&a, dir.path(), false).unwrap();
    let ts = std::fs::read_to_string(dir.path().join(TIMESERIES_FILE)).unwrap();
    let width = ts.lines().next().unwrap().split(',').count();
    assert_eq!(width, 6 + 6 * 10);
    assert!(ts.lines().all(|l| l.split(',').count() == width));
    assert_eq!(ts.lines().count(), 20_001);

    let ev = std::fs::read_to_string(dir.path().join(EVENTS_FILE)).unwrap();
    let rec = a
        .records
        .iter()
        .find(|r| r.funds.iter().any(|f| f.defaulted))
        .expect("a default within 20000 steps");
    let h = rec.funds.iter().position(|f| f.defaulted).unwrap();
    assert!(ev.lines().any(|l| l == format!("{},{h},default", rec.t)));
    let calls = ev.lines().filter(|l| l.ends_with(",margin_call")).count() as u64;
    assert_eq!(calls, a.summary.margin_call_count);
    assert_eq!(
        a.events
            .iter()
            .filter(|e| e.kind == EventKind::Default)
            .count() as u64,
        a.summary.default_count
    );
}

#[test]
fn zero_fund_run_has_no_fund_columns() {
    let dir = tempfile::tempdir().unwrap();
    let a = run(&ModelConfig::default().with_funds(vec![]).with_horizon(10)).unwrap();
    emit_run(&a, dir.path(), false).unwrap();
    let ts = std::fs::read_to_string(dir.path().join(TIMESERIES_FILE)).unwrap();
    assert_eq!(
        ts.lines().next().unwrap(),
        "t,price,log_return,xi,m,agg_leverage"
    );
}

#[test]
fn compact_writes_summary_only() {
    let dir = tempfile::tempdir().unwrap();
    let a = run(&levered(100, 1)).unwrap();
    emit_run(&a, dir.path(), true).unwrap();
    assert!(dir.path().join(SUMMARY_FILE).exists());
    assert!(dir.path().join(MANIFEST_FILE).exists());
    assert!(!dir.path().join(TIMESERIES_FILE).exists());
}

#[test]
fn absent_statistics_are_null() {
    let dir = tempfile::tempdir().unwrap();
    let a = run(&levered(50, 1)).unwrap();
    emit_run(&a, dir.path(), true).unwrap();
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join(SUMMARY_FILE)).unwrap())
            .unwrap();
    assert!(v["tail_negative"].is_null());
    assert!(v["acf_abs"][10].is_null());
}

#[test]
fn unwritable_directory_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    let a = run(&levered(10, 1)).unwrap();
    let err = emit_run(&a, &blocker.join("sub"), false).unwrap_err();
    assert_eq!(err.category(), "io");
}
