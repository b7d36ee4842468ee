//! Return statistics: log returns with a positive-mispricing mask, Hill tail
//! exponents, autocorrelation of absolute returns and the per-run summary.

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::engine::StepRecord;
use crate::error::{Error, Result};

/// Share of the largest order statistics used by the tail fit.
pub const DEFAULT_TAIL_FRACTION: f64 = 0.025;
/// Lags reported in the run summary.
pub const DEFAULT_MAX_LAG: usize = 50;
/// Fewest index pairs for an autocorrelation entry to be reported.
pub const MIN_ACF_PAIRS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct ReturnSeries {
    pub values: Vec<f64>,
    /// True where the mispricing was positive at the start of the interval.
    pub active_mask: Vec<bool>,
}

impl ReturnSeries {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Returns with a positive mispricing at the start of the interval.
    pub fn masked(&self) -> impl Iterator<Item = f64> + '_ {
        self.values
            .iter()
            .zip(&self.active_mask)
            .filter_map(|(r, &m)| m.then_some(*r))
    }

    /// Magnitudes of the masked returns on one side, zeros dropped.
    pub fn tail_samples(&self, side: TailSide) -> Vec<f64> {
        self.masked()
            .filter_map(|r| match side {
                TailSide::Negative if r < 0.0 => Some(-r),
                TailSide::Positive if r > 0.0 => Some(r),
                _ => None,
            })
            .collect()
    }
}

/// `r(t) = ln p(t+1) - ln p(t)`; the mask uses `V - p(t)`.
pub fn log_returns(prices: &[f64], fundamental_value: f64) -> Result<ReturnSeries> {
    if let Some(bad) = prices.iter().find(|p| !(**p > 0.0) || !p.is_finite()) {
        return Err(Error::InvalidInput(format!("non-positive price {bad}")));
    }
    let values = prices.windows(2).map(|w| w[1].ln() - w[0].ln()).collect();
    let active_mask = prices
        .iter()
        .take(prices.len().saturating_sub(1))
        .map(|p| fundamental_value - p > 0.0)
        .collect();
    Ok(ReturnSeries {
        values,
        active_mask,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TailSide {
    Negative,
    Positive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailFit {
    pub gamma: f64,
    pub k: usize,
    /// The (k+1)-th largest magnitude.
    pub x_min: f64,
    pub side: TailSide,
    /// Slope of log rank against log magnitude over the same order
    /// statistics, as a cross-check on `gamma`.
    pub rank_size_gamma: Option<f64>,
}

/// Hill estimator `k / sum_{i<=k} ln(x_i / x_{k+1})` over samples sorted in
/// descending order.
pub fn hill_estimate(sorted_desc: &[f64], k: usize) -> Option<f64> {
    if k == 0 || k >= sorted_desc.len() {
        return None;
    }
    let threshold = sorted_desc[k];
    if !(threshold > 0.0) {
        return None;
    }
    let denom: f64 = sorted_desc[..k].iter().map(|x| (x / threshold).ln()).sum();
    (denom > 0.0 && denom.is_finite()).then(|| k as f64 / denom)
}

/// Least-squares slope of `ln(i/n)` on `ln x_i` over the `k` largest samples, negated.
pub fn rank_size_exponent(sorted_desc: &[f64], k: usize) -> Option<f64> {
    let n = sorted_desc.len() as f64;
    if k < 2 || k > sorted_desc.len() {
        return None;
    }
    let pts: Vec<(f64, f64)> = sorted_desc[..k]
        .iter()
        .enumerate()
        .map(|(i, x)| (x.ln(), ((i + 1) as f64 / n).ln()))
        .collect();
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k as f64;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k as f64;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if !(sxx > 0.0) {
        return None;
    }
    let gamma = -sxy / sxx;
    (gamma.is_finite() && gamma > 0.0).then_some(gamma)
}

/// Hill fit over the `ceil(tail_fraction * n)` largest magnitudes.
///
/// Absent when fewer than `10 / tail_fraction` samples are supplied, when any
/// sample is not strictly positive, or when the estimate is undefined.
pub fn hill_tail_exponent(samples: &[f64], tail_fraction: f64, side: TailSide) -> Option<TailFit> {
    if !(tail_fraction > 0.0 && tail_fraction < 1.0) {
        return None;
    }
    let n = samples.len();
    if (n as f64) < 10.0 / tail_fraction || samples.iter().any(|x| !(*x > 0.0) || !x.is_finite()) {
        return None;
    }
    let k = (tail_fraction * n as f64).ceil() as usize;
    if k < 10 || k >= n {
        return None;
    }
    let mut sorted = samples.to_vec();
    sorted.sort_unstable_by(|a, b| b.total_cmp(a));
    let gamma = hill_estimate(&sorted, k)?;
    Some(TailFit {
        gamma,
        k,
        x_min: sorted[k],
        side,
        rank_size_gamma: rank_size_exponent(&sorted, k),
    })
}

/// Autocorrelation of `|r|` over pairs `(t, t+lag)` whose masks are both set.
///
/// Mean and variance are taken over all masked samples. Entry 0 is 1 when the
/// variance is positive; entries with fewer than [`MIN_ACF_PAIRS`] pairs, or
/// any entry of a zero-variance series, are absent.
pub fn acf_abs_returns(series: &ReturnSeries, max_lag: usize) -> Vec<Option<f64>> {
    let x: Vec<f64> = series.values.iter().map(|r| r.abs()).collect();
    let mask = &series.active_mask;
    let n_masked = mask.iter().filter(|m| **m).count();
    if n_masked == 0 {
        return vec![None; max_lag + 1];
    }
    let mean = series.masked().map(f64::abs).sum::<f64>() / n_masked as f64;
    let var = series
        .masked()
        .map(|r| (r.abs() - mean).powi(2))
        .sum::<f64>()
        / n_masked as f64;
    if !(var > 0.0) {
        return vec![None; max_lag + 1];
    }
    (0..=max_lag)
        .map(|lag| {
            if lag == 0 {
                return Some(1.0);
            }
            let mut pairs = 0usize;
            let mut acc = 0.0;
            for t in 0..x.len().saturating_sub(lag) {
                if mask[t] && mask[t + lag] {
                    acc += (x[t] - mean) * (x[t + lag] - mean);
                    pairs += 1;
                }
            }
            (pairs >= MIN_ACF_PAIRS).then(|| acc / pairs as f64 / var)
        })
        .collect()
}

/// Bias-corrected sample excess kurtosis (G2). Needs four samples and
/// positive variance.
pub fn excess_kurtosis(values: &[f64]) -> Option<f64> {
    let n = values.len();
    if n < 4 {
        return None;
    }
    let nf = n as f64;
    let mean = values.iter().sum::<f64>() / nf;
    let m2 = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / nf;
    let m4 = values.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / nf;
    if !(m2 > 0.0) {
        return None;
    }
    let g2 = m4 / (m2 * m2) - 3.0;
    Some(((nf + 1.0) * g2 + 6.0) * (nf - 1.0) / ((nf - 2.0) * (nf - 3.0)))
}

pub fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Mean absolute log return.
pub fn volatility(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().map(|r| r.abs()).sum::<f64>() / values.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps: u64,
    pub volatility: Option<f64>,
    pub excess_kurtosis: Option<f64>,
    pub tail_negative: Option<TailFit>,
    pub tail_positive: Option<TailFit>,
    /// Lags `0..=DEFAULT_MAX_LAG`, masked on positive mispricing.
    pub acf_abs: Vec<Option<f64>>,
    pub default_count: u64,
    pub default_rate: Option<f64>,
    pub margin_call_count: u64,
    /// Share of steps where at least one fund met a margin call.
    pub margin_call_rate: Option<f64>,
    pub mean_price: Option<f64>,
    pub mean_aggregate_leverage: Option<f64>,
    /// Per fund: time-average of `r_perf` while open.
    pub investor_return: Vec<Option<f64>>,
    /// Per fund: trading P&L net of flows over summed start-of-period wealth.
    pub investor_return_capital_weighted: Vec<Option<f64>>,
}

/// Per-fund returns to investors.
#[derive(Debug, Clone, PartialEq)]
pub struct InvestorReturns {
    /// Time average of the performance average `r_perf` over periods the
    /// fund ends open.
    pub performance: Vec<Option<f64>>,
    /// Trading P&L net of flows over summed start-of-period wealth, each
    /// period's loss floored at the wealth invested.
    pub capital_weighted: Vec<Option<f64>>,
}

pub fn investor_returns(cfg: &ModelConfig, records: &[StepRecord]) -> InvestorReturns {
    let n_funds = cfg.funds.len();
    let mut perf_sum = vec![0.0; n_funds];
    let mut open_steps = vec![0u64; n_funds];
    let mut pnl = vec![0.0; n_funds];
    let mut capital = vec![0.0; n_funds];
    let mut prev_price = cfg.fundamental_value;
    let mut prev: Vec<(f64, f64)> = vec![(cfg.initial_wealth, 0.0); n_funds];
    for rec in records {
        for (h, f) in rec.funds.iter().enumerate().take(n_funds) {
            let (w, d) = prev[h];
            if w > 0.0 {
                pnl[h] += (d * (rec.price - prev_price)).max(-w);
                capital[h] += w;
            }
            if f.wealth > 0.0 && !f.defaulted {
                perf_sum[h] += f.r_perf;
                open_steps[h] += 1;
            }
            prev[h] = (f.wealth, f.shares);
        }
        prev_price = rec.price;
    }
    InvestorReturns {
        performance: perf_sum
            .iter()
            .zip(&open_steps)
            .map(|(r, n)| (*n > 0).then(|| r / *n as f64))
            .collect(),
        capital_weighted: pnl
            .iter()
            .zip(&capital)
            .map(|(p, c)| (*c > 0.0).then(|| p / c))
            .collect(),
    }
}

pub fn summary(cfg: &ModelConfig, records: &[StepRecord]) -> RunSummary {
    let steps = records.len() as u64;
    let prices: Vec<f64> = std::iter::once(cfg.fundamental_value)
        .chain(records.iter().map(|r| r.price))
        .collect();
    let series = log_returns(&prices, cfg.fundamental_value).unwrap_or(ReturnSeries {
        values: vec![],
        active_mask: vec![],
    });
    let default_count = records
        .iter()
        .map(|r| r.funds.iter().filter(|f| f.defaulted).count() as u64)
        .sum();
    let margin_call_count = records
        .iter()
        .map(|r| r.funds.iter().filter(|f| f.margin_call).count() as u64)
        .sum();
    let call_steps = records.iter().filter(|r| r.any_margin_call()).count();
    let per_step = |x: f64| (steps > 0).then(|| x / steps as f64);
    let leverages: Vec<f64> = records.iter().map(|r| r.aggregate_leverage).collect();
    let investor = investor_returns(cfg, records);
    RunSummary {
        steps,
        volatility: volatility(&series.values),
        excess_kurtosis: excess_kurtosis(&series.values),
        tail_negative: hill_tail_exponent(
            &series.tail_samples(TailSide::Negative),
            DEFAULT_TAIL_FRACTION,
            TailSide::Negative,
        ),
        tail_positive: hill_tail_exponent(
            &series.tail_samples(TailSide::Positive),
            DEFAULT_TAIL_FRACTION,
            TailSide::Positive,
        ),
        acf_abs: acf_abs_returns(&series, DEFAULT_MAX_LAG),
        default_count,
        default_rate: per_step(default_count as f64),
        margin_call_count,
        margin_call_rate: per_step(call_steps as f64),
        mean_price: mean(&prices[1..]),
        mean_aggregate_leverage: mean(&leverages),
        investor_return: investor.performance,
        investor_return_capital_weighted: investor.capital_weighted,
    }
}
