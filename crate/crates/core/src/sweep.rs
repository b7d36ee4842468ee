//! Multi-seed parameter sweeps.
//!
//! Each (value, seed) cell is an independent run. Cells may execute in any
//! order on a worker pool; results are stored in grid order, so tables and
//! aggregates do not depend on scheduling.

use rayon::prelude::*;
use serde::Serialize;

use crate::config::ModelConfig;
use crate::engine::run;
use crate::error::{Error, Result};
use crate::io::{apply_override, fmt_f64, fmt_opt, CsvTable};
use crate::stats::RunSummary;

/// Metrics reported by default in sweep tables.
pub const DEFAULT_METRICS: [&str; 9] = [
    "gamma_neg",
    "gamma_pos",
    "volatility",
    "excess_kurtosis",
    "default_rate",
    "margin_call_rate",
    "margin_call_count",
    "mean_price",
    "mean_leverage",
];

/// Looks up a named scalar in a run summary.
///
/// Besides the [`DEFAULT_METRICS`], accepts `default_count`, `acf<lag>`,
/// `investor_return[<fund>]` and `investor_return_cw[<fund>]`.
pub fn metric(summary: &RunSummary, name: &str) -> Result<Option<f64>> {
    let indexed = |prefix: &str, values: &[Option<f64>]| -> Option<Result<Option<f64>>> {
        let idx = name
            .strip_prefix(prefix)?
            .strip_prefix('[')?
            .strip_suffix(']')?;
        Some(
            idx.parse::<usize>()
                .map_err(|_| Error::InvalidInput(format!("bad fund index in metric {name:?}")))
                .map(|i| values.get(i).copied().flatten()),
        )
    };
    if let Some(r) = indexed("investor_return", &summary.investor_return) {
        return r;
    }
    if let Some(r) = indexed(
        "investor_return_cw",
        &summary.investor_return_capital_weighted,
    ) {
        return r;
    }
    if let Some(lag) = name
        .strip_prefix("acf")
        .and_then(|l| l.parse::<usize>().ok())
    {
        return Ok(summary.acf_abs.get(lag).copied().flatten());
    }
    Ok(match name {
        "gamma_neg" => summary.tail_negative.map(|f| f.gamma),
        "gamma_pos" => summary.tail_positive.map(|f| f.gamma),
        "volatility" => summary.volatility,
        "excess_kurtosis" => summary.excess_kurtosis,
        "default_rate" => summary.default_rate,
        "default_count" => Some(summary.default_count as f64),
        "margin_call_rate" => summary.margin_call_rate,
        "margin_call_count" => Some(summary.margin_call_count as f64),
        "mean_price" => summary.mean_price,
        "mean_leverage" => summary.mean_aggregate_leverage,
        _ => return Err(Error::InvalidInput(format!("unknown metric {name:?}"))),
    })
}

/// Copy of `base` with the dotted key set to `raw`, validated.
pub fn with_override(base: &ModelConfig, key: &str, raw: &str) -> Result<ModelConfig> {
    let mut v = serde_json::to_value(base)?;
    apply_override(&mut v, key, raw)?;
    let cfg: ModelConfig =
        serde_json::from_value(v).map_err(|e| Error::config(key, e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Maps `f` over `tasks` on a pool of `jobs` threads, keeping input order.
pub fn par_map<T, R, F>(jobs: usize, tasks: &[T], f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    if jobs <= 1 {
        return Ok(tasks.iter().map(f).collect());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::InvalidInput(format!("cannot start {jobs} workers: {e}")))?;
    Ok(pool.install(|| tasks.par_iter().map(f).collect()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepCell {
    pub value: String,
    pub seed: u64,
    /// The summary, or the failed run's error as `category: message`.
    pub outcome: std::result::Result<RunSummary, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateRow {
    pub value: String,
    /// Cells where the metric is present.
    pub n: usize,
    /// Cells whose run failed.
    pub failed: usize,
    pub mean: Option<f64>,
    /// Sample standard deviation over `sqrt(n)`; needs two cells.
    pub stderr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepTable {
    pub param: String,
    pub values: Vec<String>,
    pub seeds: Vec<u64>,
    /// Value-major, seed-minor.
    pub cells: Vec<SweepCell>,
}

/// Runs every (value, seed) combination of `base` with `param` overridden.
///
/// Invalid overrides fail the whole sweep before anything runs; a run that
/// fails is recorded in its cell and the rest proceed.
pub fn sweep(
    base: &ModelConfig,
    param: &str,
    values: &[String],
    seeds: &[u64],
    jobs: usize,
) -> Result<SweepTable> {
    let configs: Vec<ModelConfig> = values
        .iter()
        .map(|v| with_override(base, param, v))
        .collect::<Result<_>>()?;
    let tasks: Vec<(usize, u64)> = (0..values.len())
        .flat_map(|i| seeds.iter().map(move |&s| (i, s)))
        .collect();
    let cells = par_map(jobs, &tasks, |&(i, seed)| SweepCell {
        value: values[i].clone(),
        seed,
        outcome: run(&configs[i].clone().with_seed(seed))
            .map(|a| a.summary)
            .map_err(|e| format!("{}: {e}", e.category())),
    })?;
    Ok(SweepTable {
        param: param.to_string(),
        values: values.to_vec(),
        seeds: seeds.to_vec(),
        cells,
    })
}

/// Mean and standard error of the present values.
pub fn mean_stderr(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    let n = xs.len();
    if n == 0 {
        return (None, None);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (Some(mean), None);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (Some(mean), Some((var / n as f64).sqrt()))
}

impl SweepTable {
    /// Metric values present for one swept value, in seed order.
    pub fn samples(&self, value: &str, name: &str) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for c in self.cells.iter().filter(|c| c.value == value) {
            if let Ok(s) = &c.outcome {
                if let Some(x) = metric(s, name)? {
                    out.push(x);
                }
            }
        }
        Ok(out)
    }

    pub fn aggregate(&self, name: &str) -> Result<Vec<AggregateRow>> {
        self.values
            .iter()
            .map(|v| {
                let xs = self.samples(v, name)?;
                let (mean, stderr) = mean_stderr(&xs);
                Ok(AggregateRow {
                    value: v.clone(),
                    n: xs.len(),
                    failed: self
                        .cells
                        .iter()
                        .filter(|c| &c.value == v && c.outcome.is_err())
                        .count(),
                    mean,
                    stderr,
                })
            })
            .collect()
    }

    /// One row per cell: value, seed, status, then each metric.
    pub fn rows_table(&self, metrics: &[&str]) -> Result<CsvTable> {
        let mut t = CsvTable::new(
            ["value", "seed", "status"]
                .into_iter()
                .map(String::from)
                .chain(metrics.iter().map(|m| m.to_string())),
        );
        for c in &self.cells {
            let mut row = vec![c.value.clone(), c.seed.to_string()];
            match &c.outcome {
                Ok(s) => {
                    row.push("ok".into());
                    for m in metrics {
                        row.push(fmt_opt(metric(s, m)?));
                    }
                }
                Err(e) => {
                    row.push(format!("\"{}\"", e.replace('"', "'")));
                    row.extend(metrics.iter().map(|_| "null".to_string()));
                }
            }
            t.push(row);
        }
        Ok(t)
    }

    /// One row per value: `n`, `failed`, then mean and standard error of each metric.
    pub fn aggregate_table(&self, metrics: &[&str]) -> Result<CsvTable> {
        let mut header = vec![
            "value".to_string(),
            "runs".to_string(),
            "failed".to_string(),
        ];
        for m in metrics {
            header.push(format!("{m}_mean"));
            header.push(format!("{m}_stderr"));
            header.push(format!("{m}_n"));
        }
        let mut t = CsvTable::new(header);
        let aggs: Vec<Vec<AggregateRow>> = metrics
            .iter()
            .map(|m| self.aggregate(m))
            .collect::<Result<_>>()?;
        for (i, v) in self.values.iter().enumerate() {
            let runs = self.cells.iter().filter(|c| &c.value == v).count();
            let failed = self
                .cells
                .iter()
                .filter(|c| &c.value == v && c.outcome.is_err())
                .count();
            let mut row = vec![v.clone(), runs.to_string(), failed.to_string()];
            for a in &aggs {
                row.push(fmt_opt(a[i].mean));
                row.push(fmt_opt(a[i].stderr));
                row.push(a[i].n.to_string());
            }
            t.push(row);
        }
        Ok(t)
    }
}

/// Parses `a,b,c` into trimmed, non-empty values.
pub fn parse_values(s: &str) -> Vec<String> {
    s.split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(String::from)
        .collect()
}

/// Parses a seed count `n` (seeds `1..=n`) or an explicit list `a,b,c`.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let s = s.trim();
    if s.is_empty() {
        return Ok(vec![]);
    }
    if !s.contains(',') {
        let n: u64 = s.parse().map_err(|_| {
            Error::InvalidInput(format!("seeds must be a count or a list, got {s:?}"))
        })?;
        return Ok((1..=n).collect());
    }
    parse_values(s)
        .iter()
        .map(|v| {
            v.parse()
                .map_err(|_| Error::InvalidInput(format!("bad seed {v:?}")))
        })
        .collect()
}

/// Formats a numeric sweep value.
pub fn value_label(v: f64) -> String {
    if v.is_finite() && v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        fmt_f64(v)
    }
}
