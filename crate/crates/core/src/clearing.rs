//! Market clearing: find the price at which noise-trader demand plus fund
//! demand equals the fixed supply.
//!
//! Fund wealth is itself a function of the candidate price (mark-to-market
//! plus investor flows), so the excess demand is nonlinear in the price and
//! may have several roots once funds are leveraged. The solver is a bracketed
//! bisection, which picks one sign change deterministically.

use serde::{Deserialize, Serialize};

use crate::config::{FlowTiming, ModelConfig};
use crate::error::{Error, Result};
use crate::model::{
    capital_flow, fund_demand, performance_update, wealth_update, FlowParams, FundState,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverSettings {
    /// Largest acceptable |excess demand|, in shares.
    pub tolerance: f64,
    pub max_iterations: u32,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iterations: 200,
        }
    }
}

/// A fund as seen by the clearing solver: its state carried from the previous
/// period plus the leverage cap in force this period.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClearingFund {
    pub state: FundState,
    pub cap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClearingProblem {
    pub xi: f64,
    pub funds: Vec<ClearingFund>,
    pub p_prev: f64,
    pub fundamental_value: f64,
    pub supply: f64,
    pub flow: FlowParams,
    pub flow_timing: FlowTiming,
    /// Funds whose wealth at the candidate price falls below this demand nothing.
    pub survival_wealth: f64,
}

impl ClearingProblem {
    pub fn new(cfg: &ModelConfig, xi: f64, p_prev: f64, funds: Vec<ClearingFund>) -> Self {
        Self {
            xi,
            funds,
            p_prev,
            fundamental_value: cfg.fundamental_value,
            supply: cfg.supply,
            flow: FlowParams::from(cfg),
            flow_timing: cfg.flow_timing,
            survival_wealth: cfg.survival_wealth(),
        }
    }

    /// Bracket used by default: `[1e-4 V, max(10 V, 2 xi / N)]`.
    pub fn default_bracket(&self) -> (f64, f64) {
        let v = self.fundamental_value;
        (1e-4 * v, (10.0 * v).max(2.0 * self.xi / self.supply))
    }
}

/// Outcome of settling one fund at a price.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Settlement {
    /// Return on last period's wealth.
    pub r: f64,
    pub r_perf: f64,
    pub flow: f64,
    /// Carried position marked at the new price, before flows.
    pub marked_wealth: f64,
    pub wealth: f64,
}

/// Marks an active fund to price `p` and applies investor flows.
pub fn settle(fund: &FundState, p: f64, prob: &ClearingProblem) -> Settlement {
    let r = if fund.wealth > 0.0 {
        fund.shares * (p - prob.p_prev) / fund.wealth
    } else {
        0.0
    };
    let r_perf = performance_update(fund.r_perf, r, prob.flow.a);
    let marked_wealth = fund.value_at(p);
    let flow = match prob.flow_timing {
        FlowTiming::Contemporaneous => capital_flow(r_perf, marked_wealth.max(0.0), &prob.flow),
        FlowTiming::Lagged => {
            capital_flow(fund.r_perf, fund.value_at(prob.p_prev).max(0.0), &prob.flow)
        }
    };
    let wealth = wealth_update(fund.wealth, fund.shares, p, prob.p_prev, flow);
    Settlement {
        r,
        r_perf,
        flow,
        marked_wealth,
        wealth,
    }
}

/// Shares the fund demands if the period closes at `p`; zero for closed funds
/// and for funds that would end the period below the survival threshold.
pub fn demand_at(fund: &ClearingFund, p: f64, prob: &ClearingProblem) -> f64 {
    if !fund.state.is_active() {
        return 0.0;
    }
    let wealth = settle(&fund.state, p, prob).wealth;
    if wealth <= 0.0 || wealth < prob.survival_wealth {
        return 0.0;
    }
    let m = prob.fundamental_value - p;
    // p > 0 is checked by the caller
    fund_demand(m, wealth, p, &fund.state.params, fund.cap).unwrap_or(0.0)
}

/// Total demand minus supply at price `p`.
pub fn excess_demand(p: f64, prob: &ClearingProblem) -> Result<f64> {
    if !(p > 0.0) || !p.is_finite() {
        return Err(Error::InvalidInput(format!(
            "candidate price must be > 0, got {p}"
        )));
    }
    let funds: f64 = prob.funds.iter().map(|f| demand_at(f, p, prob)).sum();
    Ok(prob.xi / p + funds - prob.supply)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClearingResult {
    pub price: f64,
    pub residual: f64,
    pub iterations: u32,
    pub bracket: f64,
}

/// Bisection on `[p_min, p_max]` until |excess demand| is within tolerance.
///
/// The bracket is widened geometrically if the endpoints do not straddle a
/// sign change; failing that, or failing to converge, is reported with the
/// problem's diagnostics.
pub fn clear_price(
    prob: &ClearingProblem,
    settings: &SolverSettings,
    p_min: f64,
    p_max: f64,
) -> Result<ClearingResult> {
    if !(settings.tolerance > 0.0) {
        return Err(Error::InvalidInput("solver tolerance must be > 0".into()));
    }
    if !(p_min > 0.0 && p_min < p_max) {
        return Err(Error::InvalidInput(format!(
            "invalid bracket [{p_min}, {p_max}]"
        )));
    }
    let (mut lo, mut hi) = (p_min, p_max);
    let mut f_lo = excess_demand(lo, prob)?;
    let mut widen = 0;
    while f_lo <= 0.0 && widen < 64 {
        if f_lo.abs() <= settings.tolerance {
            return Ok(ClearingResult {
                price: lo,
                residual: f_lo,
                iterations: 0,
                bracket: hi - lo,
            });
        }
        lo *= 0.5;
        f_lo = excess_demand(lo, prob)?;
        widen += 1;
    }
    let mut f_hi = excess_demand(hi, prob)?;
    widen = 0;
    while f_hi >= 0.0 && widen < 64 {
        if f_hi.abs() <= settings.tolerance {
            return Ok(ClearingResult {
                price: hi,
                residual: f_hi,
                iterations: 0,
                bracket: hi - lo,
            });
        }
        hi *= 2.0;
        f_hi = excess_demand(hi, prob)?;
        widen += 1;
    }
    if !(f_lo > 0.0 && f_hi < 0.0) {
        return Err(Error::Clearing(format!(
            "no sign change on [{lo}, {hi}]: excess demand {f_lo} .. {f_hi}; {}",
            describe(prob)
        )));
    }

    let mut best = if f_lo.abs() < f_hi.abs() {
        (lo, f_lo)
    } else {
        (hi, f_hi)
    };
    for iteration in 1..=settings.max_iterations {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let f_mid = excess_demand(mid, prob)?;
        if f_mid.abs() < best.1.abs() {
            best = (mid, f_mid);
        }
        if f_mid.abs() <= settings.tolerance {
            return Ok(ClearingResult {
                price: mid,
                residual: f_mid,
                iterations: iteration,
                bracket: hi - lo,
            });
        }
        if f_mid > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::Clearing(format!(
        "bisection did not reach tolerance {}: best price {} residual {}, bracket [{lo}, {hi}]; {}",
        settings.tolerance,
        best.0,
        best.1,
        describe(prob)
    )))
}

/// Number of sign changes of the excess demand on a `points`-point
/// logarithmic grid over the bracket. More than one means multiple clearing
/// prices exist.
pub fn sign_changes(
    prob: &ClearingProblem,
    p_min: f64,
    p_max: f64,
    points: usize,
) -> Result<usize> {
    let points = points.max(2);
    let ratio = (p_max / p_min).ln();
    let mut count = 0;
    let mut prev: Option<bool> = None;
    for i in 0..points {
        let p = p_min * (ratio * i as f64 / (points - 1) as f64).exp();
        let f = excess_demand(p, prob)?;
        if f == 0.0 {
            continue;
        }
        let positive = f > 0.0;
        if prev.is_some_and(|s| s != positive) {
            count += 1;
        }
        prev = Some(positive);
    }
    Ok(count)
}

fn describe(prob: &ClearingProblem) -> String {
    let funds: Vec<String> = prob
        .funds
        .iter()
        .map(|f| {
            format!(
                "(w={}, d={}, c={}, r_perf={}, cap={}, active={})",
                f.state.wealth,
                f.state.shares,
                f.state.cash,
                f.state.r_perf,
                f.cap,
                f.state.is_active()
            )
        })
        .collect();
    format!(
        "xi={} p_prev={} V={} N={} funds=[{}]",
        prob.xi,
        prob.p_prev,
        prob.fundamental_value,
        prob.supply,
        funds.join(", ")
    )
}
