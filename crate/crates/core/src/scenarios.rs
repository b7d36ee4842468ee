//! Named experiments.
//!
//! Each scenario writes `<out>/<name>/manifest.json`, per-seed summaries under
//! `runs/<seed>.csv` and its result tables under `tables/`. The manifest holds
//! the request and every case configuration, and is enough to repeat the
//! scenario byte for byte.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analytics::{amplification_factor, damping_factor, demand_derivative};
use crate::clearing::SolverSettings;
use crate::config::{standard_roster, FundParams, LeveragePolicy, ModelConfig};
use crate::engine::{run, RunArtifact, StepRecord};
use crate::error::{Error, Result};
use crate::io::{create_dir, fmt_f64, fmt_opt, read_manifest_json, write_json, CsvTable};
use crate::rng::RNG_ALGORITHM;
use crate::stats::{acf_abs_returns, log_returns, RunSummary, TailSide, DEFAULT_MAX_LAG};
use crate::sweep::{mean_stderr, metric, par_map, value_label, DEFAULT_METRICS};

pub const MANIFEST_FILE: &str = "manifest.json";

struct Entry {
    name: &'static str,
    description: &'static str,
    default_seeds: &'static [u64],
}

const REGISTRY: [Entry; 8] = [
    Entry {
        name: "fig2_wealth",
        description: "wealth paths of ten funds (beta 5..50) at leverage cap 20 over 30000 steps",
        default_seeds: &[1],
    },
    Entry {
        name: "fig3_distributions",
        description: "return distributions for noise traders only, unlevered funds and cap 10",
        default_seeds: &[1, 2, 3, 4, 5],
    },
    Entry {
        name: "fig3c_gamma_sweep",
        description: "negative-tail exponent as the leverage cap goes from 1 to 15",
        default_seeds: &[1, 2, 3],
    },
    Entry {
        name: "fig4_acf",
        description:
            "autocorrelation of absolute returns and crash/margin-call coincidence, caps 1 and 10",
        default_seeds: &[1],
    },
    Entry {
        name: "fig5_derivatives",
        description: "closed-form demand derivative for beta 10 and caps 1, 2, 3 and uncapped",
        default_seeds: &[],
    },
    Entry {
        name: "crash_anatomy",
        description: "prices, leverage, wealth and flows around the largest crash of a cap-10 run",
        default_seeds: &[1],
    },
    Entry {
        name: "fig6_vol_regulation",
        description: "fixed versus volatility-adjusted leverage caps over caps 1..20",
        default_seeds: &[1, 2, 3],
    },
    Entry {
        name: "fig7_evolution",
        description:
            "returns to investors of one fund whose cap goes 1..10 among nine peers at cap 3",
        default_seeds: &FIG7_SEEDS,
    },
];

const FIG7_SEEDS: [u64; 50] = {
    let mut s = [0u64; 50];
    let mut i = 0;
    while i < 50 {
        s[i] = i as u64 + 1;
        i += 1;
    }
    s
};

pub fn available() -> Vec<&'static str> {
    REGISTRY.iter().map(|e| e.name).collect()
}

pub fn describe(name: &str) -> Option<&'static str> {
    REGISTRY
        .iter()
        .find(|e| e.name == name)
        .map(|e| e.description)
}

fn lookup(name: &str) -> Result<&'static Entry> {
    REGISTRY
        .iter()
        .find(|e| e.name == name)
        .ok_or_else(|| Error::UnknownScenario {
            name: name.to_string(),
            available: available().iter().map(|s| s.to_string()).collect(),
        })
}

/// Which returns-to-investors measure heads the fig7 tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InvestorMetric {
    /// Time average of the performance average `r_perf` while the fund is open.
    #[default]
    Performance,
    /// Trading P&L net of flows over summed start-of-period wealth.
    CapitalWeighted,
}

impl InvestorMetric {
    fn column(self) -> &'static str {
        match self {
            InvestorMetric::Performance => "time_avg_r_perf",
            InvestorMetric::CapitalWeighted => "pnl_over_capital",
        }
    }

    fn values(self, s: &RunSummary) -> &[Option<f64>] {
        match self {
            InvestorMetric::Performance => &s.investor_return,
            InvestorMetric::CapitalWeighted => &s.investor_return_capital_weighted,
        }
    }

    fn other(self) -> Self {
        match self {
            InvestorMetric::Performance => InvestorMetric::CapitalWeighted,
            InvestorMetric::CapitalWeighted => InvestorMetric::Performance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioRequest {
    pub scenario: String,
    pub seeds: Vec<u64>,
    /// Replaces every case's horizon.
    pub steps: Option<u64>,
    #[serde(default)]
    pub investor_metric: InvestorMetric,
}

impl ScenarioRequest {
    /// A request with the scenario's default seeds.
    pub fn new(name: &str) -> Result<Self> {
        let e = lookup(name)?;
        Ok(Self {
            scenario: e.name.to_string(),
            seeds: e.default_seeds.to_vec(),
            steps: None,
            investor_metric: InvestorMetric::default(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseConfig {
    pub case: String,
    pub value: Option<String>,
    pub config: ModelConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioManifest {
    pub request: ScenarioRequest,
    pub description: String,
    pub version: String,
    pub rng: String,
    pub solver: SolverSettings,
    pub cases: Vec<CaseConfig>,
    /// Paths relative to the scenario directory.
    pub files: Vec<String>,
    pub notes: Vec<String>,
}

struct Case {
    name: String,
    value: Option<String>,
    config: ModelConfig,
}

impl Case {
    fn new(name: &str, value: Option<String>, config: ModelConfig) -> Self {
        Self {
            name: name.to_string(),
            value,
            config,
        }
    }
}

struct Output {
    dir: PathBuf,
    files: Vec<String>,
}

impl Output {
    fn table(&mut self, name: &str, table: &CsvTable) -> Result<()> {
        let rel = format!("tables/{name}.csv");
        table.write(&self.dir.join(&rel))?;
        self.files.push(rel);
        Ok(())
    }
}

/// Runs `cases x seeds` and hands each artifact to `extract`, in grid order.
fn run_grid<R, F>(
    cases: &[Case],
    seeds: &[u64],
    jobs: usize,
    extract: F,
) -> Result<Vec<(usize, u64, R)>>
where
    R: Send,
    F: Fn(usize, &RunArtifact) -> R + Sync + Send,
{
    let tasks: Vec<(usize, u64)> = (0..cases.len())
        .flat_map(|c| seeds.iter().map(move |&s| (c, s)))
        .collect();
    par_map(jobs, &tasks, |&(c, seed)| {
        run(&cases[c].config.clone().with_seed(seed)).map(|a| (c, seed, extract(c, &a)))
    })?
    .into_iter()
    .collect()
}

/// Writes `runs/<seed>.csv`: one row per case with the standard metrics.
fn write_seed_runs(
    out: &mut Output,
    cases: &[Case],
    seeds: &[u64],
    results: &[(usize, u64, RunSummary)],
) -> Result<()> {
    for &seed in seeds {
        let mut t = CsvTable::new(
            ["case", "value", "seed"]
                .into_iter()
                .map(String::from)
                .chain(DEFAULT_METRICS.iter().map(|m| m.to_string())),
        );
        for (c, _, s) in results.iter().filter(|r| r.1 == seed) {
            let mut row = vec![
                cases[*c].name.clone(),
                cases[*c].value.clone().unwrap_or_default(),
                seed.to_string(),
            ];
            for m in DEFAULT_METRICS {
                row.push(fmt_opt(metric(s, m)?));
            }
            t.push(row);
        }
        let rel = format!("runs/{seed}.csv");
        t.write(&out.dir.join(&rel))?;
        out.files.push(rel);
    }
    Ok(())
}

/// Aggregate table over seeds, one row per case.
fn aggregate_table(
    cases: &[Case],
    results: &[(usize, u64, RunSummary)],
    metrics: &[&str],
) -> Result<CsvTable> {
    let mut header = vec!["case".to_string(), "value".to_string(), "runs".to_string()];
    for m in metrics {
        header.extend([format!("{m}_mean"), format!("{m}_stderr"), format!("{m}_n")]);
    }
    let mut t = CsvTable::new(header);
    for (c, case) in cases.iter().enumerate() {
        let sums: Vec<&RunSummary> = results.iter().filter(|r| r.0 == c).map(|r| &r.2).collect();
        let mut row = vec![
            case.name.clone(),
            case.value.clone().unwrap_or_default(),
            sums.len().to_string(),
        ];
        for m in metrics {
            let mut xs = Vec::new();
            for s in &sums {
                if let Some(x) = metric(s, m)? {
                    xs.push(x);
                }
            }
            let (mean, se) = mean_stderr(&xs);
            row.extend([fmt_opt(mean), fmt_opt(se), xs.len().to_string()]);
        }
        t.push(row);
    }
    Ok(t)
}

/// Step indices of the `count` most negative returns whose interval starts
/// with positive mispricing, most negative first. Index `i` is the return
/// into `records[i]`.
pub fn largest_drops(artifact: &RunArtifact, count: usize) -> Vec<(usize, f64)> {
    let Ok(series) = log_returns(&artifact.prices(), artifact.config.fundamental_value) else {
        return vec![];
    };
    let mut drops: Vec<(usize, f64)> = series
        .values
        .iter()
        .zip(&series.active_mask)
        .enumerate()
        .filter(|(_, (r, m))| **m && **r < 0.0)
        .map(|(i, (r, _))| (i, *r))
        .collect();
    drops.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    drops.truncate(count);
    drops
}

fn horizon(req: &ScenarioRequest, default: u64) -> u64 {
    req.steps.unwrap_or(default)
}

fn standard(lambda: f64, steps: u64) -> ModelConfig {
    ModelConfig::default()
        .with_funds(standard_roster(lambda))
        .with_horizon(steps)
}

/// Runs a scenario and writes its directory under `out_root`.
pub fn run_scenario(
    req: &ScenarioRequest,
    out_root: &Path,
    jobs: usize,
) -> Result<ScenarioManifest> {
    let entry = lookup(&req.scenario)?;
    let dir = out_root.join(entry.name);
    create_dir(&dir.join("tables"))?;
    create_dir(&dir.join("runs"))?;
    let mut out = Output { dir, files: vec![] };
    let mut notes = Vec::new();
    let cases = match entry.name {
        "fig2_wealth" => fig2_wealth(req, jobs, &mut out)?,
        "fig3_distributions" => fig3_distributions(req, jobs, &mut out)?,
        "fig3c_gamma_sweep" => fig3c_gamma_sweep(req, jobs, &mut out)?,
        "fig4_acf" => fig4_acf(req, jobs, &mut out)?,
        "fig5_derivatives" => fig5_derivatives(&mut out)?,
        "crash_anatomy" => crash_anatomy(req, jobs, &mut out)?,
        "fig6_vol_regulation" => fig6_vol_regulation(req, jobs, &mut out)?,
        "fig7_evolution" => {
            notes.push(
                "reintroduction delay set to 10 steps for every fund in this scenario".to_string(),
            );
            notes.push(format!(
                "investor return column {}: {}",
                req.investor_metric.column(),
                match req.investor_metric {
                    InvestorMetric::Performance =>
                        "mean over open periods of r_perf(t) = (1-a) r_perf(t-1) + a r(t)",
                    InvestorMetric::CapitalWeighted =>
                        "sum_t max(D(t-1)(p(t)-p(t-1)), -W(t-1)) / sum_t W(t-1)",
                }
            ));
            fig7_evolution(req, jobs, &mut out)?
        }
        _ => unreachable!("registry and dispatch agree"),
    };
    out.files.sort();
    let manifest = ScenarioManifest {
        request: req.clone(),
        description: entry.description.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        rng: RNG_ALGORITHM.to_string(),
        solver: SolverSettings::default(),
        cases: cases
            .into_iter()
            .map(|c| CaseConfig {
                case: c.name,
                value: c.value,
                config: c.config,
            })
            .collect(),
        files: out.files.clone(),
        notes,
    };
    write_json(&out.dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Repeats the scenario recorded in a manifest.
pub fn rerun(manifest: &Path, out_root: &Path, jobs: usize) -> Result<ScenarioManifest> {
    let m: ScenarioManifest = read_manifest_json(manifest)?;
    run_scenario(&m.request, out_root, jobs)
}

fn fig2_wealth(req: &ScenarioRequest, jobs: usize, out: &mut Output) -> Result<Vec<Case>> {
    let cases = vec![Case::new(
        "lambda_20",
        None,
        standard(20.0, horizon(req, 30_000)),
    )];
    let n_funds = cases[0].config.funds.len();
    let results = run_grid(&cases, &req.seeds, jobs, |_, a| {
        let mut t = CsvTable::new(
            ["t".to_string(), "price".to_string()]
                .into_iter()
                .chain((0..n_funds).map(|h| format!("wealth_{h}"))),
        );
        for r in &a.records {
            let mut row = vec![r.t.to_string(), fmt_f64(r.price)];
            row.extend(r.funds.iter().map(|f| fmt_f64(f.wealth)));
            t.push(row);
        }
        let mut per_fund = Vec::new();
        for h in 0..n_funds {
            let w: Vec<f64> = a.records.iter().map(|r| r.funds[h].wealth).collect();
            let max = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let defaults = a.records.iter().filter(|r| r.funds[h].defaulted).count();
            per_fund.push((max, crate::stats::mean(&w), defaults));
        }
        (a.summary.clone(), t, per_fund)
    })?;
    let mut summary = CsvTable::new([
        "seed",
        "fund",
        "beta",
        "lambda_max",
        "max_wealth",
        "mean_wealth",
        "defaults",
    ]);
    for (_, seed, (_, t, per_fund)) in &results {
        out.table(&format!("wealth_{seed}"), t)?;
        for (h, (max, mean, defaults)) in per_fund.iter().enumerate() {
            let p = cases[0].config.funds[h];
            summary.push(vec![
                seed.to_string(),
                h.to_string(),
                value_label(p.beta),
                value_label(p.lambda_max),
                fmt_opt(max.is_finite().then_some(*max)),
                fmt_opt(*mean),
                defaults.to_string(),
            ]);
        }
    }
    out.table("wealth_summary", &summary)?;
    let sums: Vec<_> = results.into_iter().map(|(c, s, r)| (c, s, r.0)).collect();
    write_seed_runs(out, &cases, &req.seeds, &sums)?;
    Ok(cases)
}

fn fig3_distributions(req: &ScenarioRequest, jobs: usize, out: &mut Output) -> Result<Vec<Case>> {
    let steps = horizon(req, 100_000);
    let cases = vec![
        Case::new("noise_only", None, standard(1.0, steps).with_funds(vec![])),
        Case::new("unlevered", None, standard(1.0, steps)),
        Case::new("lambda_10", None, standard(10.0, steps)),
    ];
    let results = run_grid(&cases, &req.seeds, jobs, |_, a| {
        let series =
            log_returns(&a.prices(), a.config.fundamental_value).expect("prices are positive");
        (
            a.summary.clone(),
            series.tail_samples(TailSide::Negative),
            series.tail_samples(TailSide::Positive),
        )
    })?;

    let mut fits = CsvTable::new([
        "case",
        "seed",
        "side",
        "gamma",
        "k",
        "x_min",
        "rank_size_gamma",
        "volatility",
        "excess_kurtosis",
    ]);
    for (c, seed, (s, _, _)) in &results {
        for (side, fit) in [("negative", s.tail_negative), ("positive", s.tail_positive)] {
            fits.push(vec![
                cases[*c].name.clone(),
                seed.to_string(),
                side.to_string(),
                fmt_opt(fit.map(|f| f.gamma)),
                fit.map_or("null".into(), |f| f.k.to_string()),
                fmt_opt(fit.map(|f| f.x_min)),
                fmt_opt(fit.and_then(|f| f.rank_size_gamma)),
                fmt_opt(s.volatility),
                fmt_opt(s.excess_kurtosis),
            ]);
        }
    }
    out.table("tail_fits", &fits)?;

    // complementary CDF of masked return magnitudes, pooled over seeds
    let mut ccdf = CsvTable::new(["case", "side", "r", "ccdf", "samples"]);
    for (c, case) in cases.iter().enumerate() {
        for (side, pick) in [("negative", 1usize), ("positive", 2)] {
            let mut pooled: Vec<f64> = results
                .iter()
                .filter(|r| r.0 == c)
                .flat_map(|r| {
                    if pick == 1 {
                        r.2 .1.iter()
                    } else {
                        r.2 .2.iter()
                    }
                })
                .copied()
                .collect();
            if pooled.is_empty() {
                continue;
            }
            pooled.sort_by(f64::total_cmp);
            let n = pooled.len();
            let (lo, hi) = (1e-4f64, pooled[n - 1]);
            if !(hi > lo) {
                continue;
            }
            for i in 0..=40 {
                let r = lo * (hi / lo).powf(i as f64 / 40.0);
                let above = n - pooled.partition_point(|x| *x <= r);
                ccdf.push(vec![
                    case.name.clone(),
                    side.to_string(),
                    fmt_f64(r),
                    fmt_f64(above as f64 / n as f64),
                    n.to_string(),
                ]);
            }
        }
    }
    out.table("tail_ccdf", &ccdf)?;

    let sums: Vec<_> = results.into_iter().map(|(c, s, r)| (c, s, r.0)).collect();
    out.table(
        "distributions",
        &aggregate_table(&cases, &sums, &DEFAULT_METRICS)?,
    )?;
    write_seed_runs(out, &cases, &req.seeds, &sums)?;
    Ok(cases)
}

fn fig3c_gamma_sweep(req: &ScenarioRequest, jobs: usize, out: &mut Output) -> Result<Vec<Case>> {
    let steps = horizon(req, 100_000);
    let cases: Vec<Case> = (1..=15)
        .map(|l| Case::new("lambda_max", Some(l.to_string()), standard(l as f64, steps)))
        .collect();
    let results = run_grid(&cases, &req.seeds, jobs, |_, a| a.summary.clone())?;
    out.table(
        "gamma_sweep",
        &aggregate_table(&cases, &results, &DEFAULT_METRICS)?,
    )?;
    write_seed_runs(out, &cases, &req.seeds, &results)?;
    Ok(cases)
}

/// Number of masked returns, for the white-noise band `2 / sqrt(n)`.
fn masked_count(a: &RunArtifact) -> usize {
    log_returns(&a.prices(), a.config.fundamental_value)
        .map(|s| s.active_mask.iter().filter(|m| **m).count())
        .unwrap_or(0)
}

fn fig4_acf(req: &ScenarioRequest, jobs: usize, out: &mut Output) -> Result<Vec<Case>> {
    let steps = horizon(req, 100_000);
    let cases = vec![
        Case::new("lambda_10", None, standard(10.0, steps)),
        Case::new("lambda_1", None, standard(1.0, steps)),
    ];
    let results = run_grid(&cases, &req.seeds, jobs, |_, a| {
        let series =
            log_returns(&a.prices(), a.config.fundamental_value).expect("prices are positive");
        let acf = acf_abs_returns(&series, DEFAULT_MAX_LAG);
        let drops: Vec<(u64, f64, bool, f64)> = largest_drops(a, 20)
            .into_iter()
            .map(|(i, r)| {
                let rec: &StepRecord = &a.records[i];
                (rec.t, r, rec.any_margin_call(), rec.aggregate_leverage)
            })
            .collect();
        let path: Vec<(u64, f64, f64, f64, bool)> = a
            .records
            .iter()
            .map(|r| {
                (
                    r.t,
                    r.price,
                    r.mispricing,
                    r.aggregate_leverage,
                    r.any_margin_call(),
                )
            })
            .collect();
        (a.summary.clone(), acf, masked_count(a), drops, path)
    })?;

    let mut acf_t = CsvTable::new(["case", "seed", "lag", "acf", "band", "masked_returns"]);
    let mut crash_t = CsvTable::new([
        "case",
        "seed",
        "rank",
        "t",
        "log_return",
        "margin_call",
        "agg_leverage",
        "call_rate",
    ]);
    for (c, seed, (s, acf, n, drops, path)) in &results {
        let band = (*n > 0).then(|| 2.0 / (*n as f64).sqrt());
        for (lag, a) in acf.iter().enumerate() {
            acf_t.push(vec![
                cases[*c].name.clone(),
                seed.to_string(),
                lag.to_string(),
                fmt_opt(*a),
                fmt_opt(band),
                n.to_string(),
            ]);
        }
        for (rank, (t, r, call, lev)) in drops.iter().enumerate() {
            crash_t.push(vec![
                cases[*c].name.clone(),
                seed.to_string(),
                (rank + 1).to_string(),
                t.to_string(),
                fmt_f64(*r),
                u8::from(*call).to_string(),
                fmt_f64(*lev),
                fmt_opt(s.margin_call_rate),
            ]);
        }
        let mut ts = CsvTable::new(["t", "price", "m", "agg_leverage", "margin_call"]);
        for (t, p, m, lev, call) in path {
            ts.push(vec![
                t.to_string(),
                fmt_f64(*p),
                fmt_f64(*m),
                fmt_f64(*lev),
                u8::from(*call).to_string(),
            ]);
        }
        out.table(&format!("timeseries_{}_{seed}", cases[*c].name), &ts)?;
    }
    out.table("acf", &acf_t)?;
    out.table("largest_drops", &crash_t)?;
    let sums: Vec<_> = results.into_iter().map(|(c, s, r)| (c, s, r.0)).collect();
    write_seed_runs(out, &cases, &req.seeds, &sums)?;
    Ok(cases)
}

/// Leverage caps plotted for the derivative curves.
pub const DERIVATIVE_CAPS: [f64; 4] = [1.0, 2.0, 3.0, f64::INFINITY];

fn fig5_derivatives(out: &mut Output) -> Result<Vec<Case>> {
    let (beta, v) = (10.0, 1.0);
    let mut t = CsvTable::new(["m", "lambda_1", "lambda_2", "lambda_3", "lambda_inf"]);
    for i in 0..=60 {
        let m = i as f64 / 100.0;
        let mut row = vec![fmt_f64(m)];
        for lam in DERIVATIVE_CAPS {
            row.push(fmt_f64(
                demand_derivative(m, beta, lam, v)?.dd_dm_per_wealth,
            ));
        }
        t.push(row);
    }
    out.table("derivatives", &t)?;

    let cfg = ModelConfig::default();
    let mut f = CsvTable::new(["lambda_max", "amplification", "damping_unlevered_w2"]);
    for lam in 1..=20 {
        let lam = lam as f64;
        f.push(vec![
            value_label(lam),
            fmt_opt(amplification_factor(lam, cfg.fundamental_value, cfg.supply)),
            fmt_opt(damping_factor(
                beta,
                cfg.supply,
                cfg.initial_wealth,
                0.0,
                cfg.fundamental_value,
            )),
        ]);
    }
    out.table("volatility_factors", &f)?;
    Ok(vec![])
}

fn crash_anatomy(req: &ScenarioRequest, jobs: usize, out: &mut Output) -> Result<Vec<Case>> {
    let cases = vec![Case::new(
        "lambda_10",
        None,
        standard(10.0, horizon(req, 100_000)),
    )];
    let n_funds = cases[0].config.funds.len();
    let results = run_grid(&cases, &req.seeds, jobs, |_, a| {
        let mut header = vec!["t", "price", "m", "xi", "agg_leverage"]
            .into_iter()
            .map(String::from)
            .collect::<Vec<_>>();
        for h in 0..n_funds {
            for c in [
                "wealth",
                "shares",
                "leverage",
                "margin_call",
                "defaulted",
                "flow",
            ] {
                header.push(format!("{c}_{h}"));
            }
        }
        let mut t = CsvTable::new(header);
        let mut ev = CsvTable::new(["t", "fund", "event"]);
        if let Some(&(i, _)) = largest_drops(a, 1).first() {
            let lo = i.saturating_sub(150);
            let hi = (i + 50).min(a.records.len() - 1);
            for r in &a.records[lo..=hi] {
                let mut row = vec![
                    r.t.to_string(),
                    fmt_f64(r.price),
                    fmt_f64(r.mispricing),
                    fmt_f64(r.xi),
                    fmt_f64(r.aggregate_leverage),
                ];
                for f in &r.funds {
                    row.extend([
                        fmt_f64(f.wealth),
                        fmt_f64(f.shares),
                        fmt_f64(f.leverage),
                        u8::from(f.margin_call).to_string(),
                        u8::from(f.defaulted).to_string(),
                        fmt_f64(f.flow),
                    ]);
                }
                t.push(row);
            }
            let (t_lo, t_hi) = (a.records[lo].t, a.records[hi].t);
            for e in a.events.iter().filter(|e| e.t >= t_lo && e.t <= t_hi) {
                ev.push(vec![
                    e.t.to_string(),
                    e.fund.to_string(),
                    e.kind.as_str().to_string(),
                ]);
            }
        }
        (a.summary.clone(), t, ev)
    })?;
    for (_, seed, (_, t, ev)) in &results {
        out.table(&format!("crash_window_{seed}"), t)?;
        out.table(&format!("crash_events_{seed}"), ev)?;
    }
    let sums: Vec<_> = results.into_iter().map(|(c, s, r)| (c, s, r.0)).collect();
    write_seed_runs(out, &cases, &req.seeds, &sums)?;
    Ok(cases)
}

fn fig6_vol_regulation(req: &ScenarioRequest, jobs: usize, out: &mut Output) -> Result<Vec<Case>> {
    let steps = horizon(req, 100_000);
    let mut cases = Vec::new();
    for (name, policy) in [
        ("fixed", LeveragePolicy::Fixed),
        ("adaptive", LeveragePolicy::volatility_adjusted()),
    ] {
        for l in 1..=20 {
            cases.push(Case::new(
                name,
                Some(l.to_string()),
                standard(l as f64, steps).with_policy(policy),
            ));
        }
    }
    let results = run_grid(&cases, &req.seeds, jobs, |_, a| a.summary.clone())?;
    out.table(
        "vol_regulation",
        &aggregate_table(
            &cases,
            &results,
            &[
                "volatility",
                "default_rate",
                "mean_price",
                "mean_leverage",
                "margin_call_rate",
            ],
        )?,
    )?;
    write_seed_runs(out, &cases, &req.seeds, &results)?;

    // price and leverage paths at cap 10 for the first seed
    if let Some(&seed) = req.seeds.first() {
        let paths: Vec<Case> = ["fixed", "adaptive"]
            .into_iter()
            .map(|n| {
                let c = cases
                    .iter()
                    .find(|c| c.name == n && c.value.as_deref() == Some("10"))
                    .expect("cap 10 case");
                Case::new(n, c.value.clone(), c.config.clone())
            })
            .collect();
        let runs = run_grid(&paths, &[seed], jobs, |_, a| {
            a.records
                .iter()
                .map(|r| {
                    (
                        r.t,
                        r.price,
                        r.aggregate_leverage,
                        r.funds.iter().map(|f| f.cap).fold(f64::NAN, f64::max),
                    )
                })
                .collect::<Vec<_>>()
        })?;
        let mut t = CsvTable::new([
            "t",
            "price_fixed",
            "leverage_fixed",
            "price_adaptive",
            "leverage_adaptive",
            "cap_adaptive",
        ]);
        for (a, b) in runs[0].2.iter().zip(&runs[1].2) {
            t.push(vec![
                a.0.to_string(),
                fmt_f64(a.1),
                fmt_f64(a.2),
                fmt_f64(b.1),
                fmt_f64(b.2),
                fmt_f64(b.3),
            ]);
        }
        out.table(&format!("paths_lambda_10_{seed}"), &t)?;
    }
    Ok(cases)
}

/// Nine peers at cap 3 plus a tenth fund at `swept_cap`, all with aggression
/// 20 and a reintroduction delay of 10 steps.
pub fn evolution_config(swept_cap: f64, steps: u64) -> ModelConfig {
    let mut funds = vec![FundParams::new(20.0, 3.0); 9];
    funds.push(FundParams::new(20.0, swept_cap));
    ModelConfig {
        reintro_delay: 10,
        ..ModelConfig::default().with_funds(funds).with_horizon(steps)
    }
}

/// Swept fund's return and the mean over its peers.
pub fn swept_vs_peers(values: &[Option<f64>]) -> (Option<f64>, Option<f64>) {
    let Some((last, peers)) = values.split_last() else {
        return (None, None);
    };
    let p: Vec<f64> = peers.iter().flatten().copied().collect();
    (*last, crate::stats::mean(&p))
}

fn fig7_evolution(req: &ScenarioRequest, jobs: usize, out: &mut Output) -> Result<Vec<Case>> {
    let steps = horizon(req, 100_000);
    let cases: Vec<Case> = (1..=10)
        .map(|l| {
            Case::new(
                "swept_lambda_max",
                Some(l.to_string()),
                evolution_config(l as f64, steps),
            )
        })
        .collect();
    let results = run_grid(&cases, &req.seeds, jobs, |_, a| a.summary.clone())?;
    let primary = req.investor_metric;
    let alt = primary.other();
    let (pc, ac) = (primary.column(), alt.column());

    let mut rows = CsvTable::new(vec![
        "swept_lambda_max".to_string(),
        "seed".to_string(),
        format!("swept_{pc}"),
        format!("peers_{pc}"),
        format!("diff_{pc}"),
        format!("swept_{ac}"),
        format!("peers_{ac}"),
        "swept_defaults_per_step".to_string(),
    ]);
    let mut per_case: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = vec![Default::default(); cases.len()];
    for (c, seed, s) in &results {
        let (sw, pe) = swept_vs_peers(primary.values(s));
        let (sw_a, pe_a) = swept_vs_peers(alt.values(s));
        let diff = sw.zip(pe).map(|(a, b)| a - b);
        if let Some(x) = sw {
            per_case[*c].0.push(x);
        }
        if let Some(x) = pe {
            per_case[*c].1.push(x);
        }
        if let Some(x) = diff {
            per_case[*c].2.push(x);
        }
        rows.push(vec![
            cases[*c].value.clone().unwrap_or_default(),
            seed.to_string(),
            fmt_opt(sw),
            fmt_opt(pe),
            fmt_opt(diff),
            fmt_opt(sw_a),
            fmt_opt(pe_a),
            fmt_opt(s.default_rate),
        ]);
    }
    out.table("evolution_runs", &rows)?;

    let mut agg = CsvTable::new(vec![
        "swept_lambda_max".to_string(),
        "n".to_string(),
        format!("swept_{pc}_mean"),
        format!("swept_{pc}_stderr"),
        format!("peers_{pc}_mean"),
        format!("peers_{pc}_stderr"),
        format!("diff_{pc}_mean"),
        format!("diff_{pc}_stderr"),
    ]);
    for (case, (sw, pe, diff)) in cases.iter().zip(&per_case) {
        let (a, b) = mean_stderr(sw);
        let (c, d) = mean_stderr(pe);
        let (e, f) = mean_stderr(diff);
        agg.push(vec![
            case.value.clone().unwrap_or_default(),
            diff.len().to_string(),
            fmt_opt(a),
            fmt_opt(b),
            fmt_opt(c),
            fmt_opt(d),
            fmt_opt(e),
            fmt_opt(f),
        ]);
    }
    out.table("evolution", &agg)?;
    write_seed_runs(out, &cases, &req.seeds, &results)?;
    Ok(cases)
}
