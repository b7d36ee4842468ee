//! Agent state and the per-period update rules: noise-trader cash, fund demand
//! under a leverage cap, wealth accounting, investor flows and the default
//! lifecycle.
//!
//! Everything here is a pure function of its arguments.

use serde::{Deserialize, Serialize};

use crate::config::{FundParams, LeveragePolicy, ModelConfig};
use crate::error::{Error, Result};

/// Parameters of the investor-flow rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowParams {
    pub a: f64,
    pub b: f64,
    pub r_b: f64,
}

impl From<&ModelConfig> for FlowParams {
    fn from(cfg: &ModelConfig) -> Self {
        Self {
            a: cfg.a,
            b: cfg.b,
            r_b: cfg.r_b,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum FundStatus {
    Active,
    Defaulted { reentry_time: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FundState {
    pub params: FundParams,
    pub wealth: f64,
    pub shares: f64,
    /// Negative when the fund is borrowing.
    pub cash: f64,
    pub r_perf: f64,
    pub status: FundStatus,
}

impl FundState {
    /// A fresh fund holding all of its wealth in cash.
    pub fn fresh(params: FundParams, wealth: f64) -> Self {
        Self {
            params,
            wealth,
            shares: 0.0,
            cash: wealth,
            r_perf: 0.0,
            status: FundStatus::Active,
        }
    }

    pub fn is_active(&self) -> bool {
        matches!(self.status, FundStatus::Active)
    }

    /// Mark-to-market value of the carried position at price `p`, before flows.
    pub fn value_at(&self, p: f64) -> f64 {
        self.shares * p + self.cash
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LifecycleEvent {
    Default,
    Rebirth,
}

/// Cash the noise traders spend on the asset this period.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseTraderState {
    pub xi: f64,
}

/// One step of the log-AR(1) noise-trader process, mean-reverting to `V * N`.
pub fn noise_trader_step(xi_prev: f64, chi: f64, cfg: &ModelConfig) -> Result<f64> {
    if !xi_prev.is_finite() || xi_prev <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "noise-trader cash must be positive and finite, got {xi_prev}"
        )));
    }
    if !chi.is_finite() {
        return Err(Error::InvalidInput(format!("non-finite noise draw {chi}")));
    }
    let anchor = (cfg.fundamental_value * cfg.supply).ln();
    let log_xi = cfg.rho * xi_prev.ln() + cfg.sigma * chi + (1.0 - cfg.rho) * anchor;
    Ok(log_xi.exp())
}

/// Fraction of wealth the fund wants in the asset at mispricing `m`.
///
/// Ties at the critical mispricing go to the capped branch.
pub fn target_exposure(m: f64, params: &FundParams, cap: f64) -> f64 {
    if m <= 0.0 {
        0.0
    } else if m >= cap / params.beta {
        cap
    } else {
        params.beta * m
    }
}

/// Shares demanded by a value investor with the given wealth at price `p`.
pub fn fund_demand(m: f64, wealth: f64, p: f64, params: &FundParams, cap: f64) -> Result<f64> {
    if !(p > 0.0) {
        return Err(Error::InvalidInput(format!("price must be > 0, got {p}")));
    }
    Ok(target_exposure(m, params, cap) * wealth / p)
}

/// Position value over wealth. `None` when wealth is not positive, which
/// callers treat as insolvency.
pub fn leverage(shares: f64, p: f64, wealth: f64) -> Option<f64> {
    (wealth > 0.0).then(|| shares * p / wealth)
}

pub fn performance_update(r_perf_prev: f64, r: f64, a: f64) -> f64 {
    (1.0 - a) * r_perf_prev + a * r
}

/// Investor flow into (positive) or out of the fund. Investors never withdraw
/// more than the fund is worth.
pub fn capital_flow(r_perf: f64, fund_value: f64, flow: &FlowParams) -> f64 {
    let raw = flow.b * (r_perf - flow.r_b) * fund_value;
    raw.max(-fund_value)
}

pub fn wealth_update(w_prev: f64, shares_prev: f64, p: f64, p_prev: f64, flow: f64) -> f64 {
    w_prev + (p - p_prev) * shares_prev + flow
}

/// Default and re-entry bookkeeping.
///
/// An active fund whose new wealth is strictly below the survival threshold is
/// closed with zero holdings and scheduled for re-entry after the configured
/// delay. A closed fund whose re-entry time has come is replaced by a fresh
/// fund with the initial wealth and the same parameters; `w_new` is ignored for
/// closed funds.
pub fn lifecycle_step(
    fund: &FundState,
    w_new: f64,
    t: u64,
    cfg: &ModelConfig,
) -> (FundState, Option<LifecycleEvent>) {
    match fund.status {
        FundStatus::Active => {
            if w_new < cfg.survival_wealth() || w_new <= 0.0 {
                let closed = FundState {
                    wealth: 0.0,
                    shares: 0.0,
                    cash: 0.0,
                    r_perf: 0.0,
                    status: FundStatus::Defaulted {
                        reentry_time: t + cfg.reintro_delay,
                    },
                    ..*fund
                };
                (closed, Some(LifecycleEvent::Default))
            } else {
                (
                    FundState {
                        wealth: w_new,
                        ..*fund
                    },
                    None,
                )
            }
        }
        FundStatus::Defaulted { reentry_time } if reentry_time <= t => (
            FundState::fresh(fund.params, cfg.initial_wealth),
            Some(LifecycleEvent::Rebirth),
        ),
        FundStatus::Defaulted { .. } => (*fund, None),
    }
}

/// Leverage cap in force this period given the trailing variance.
pub fn effective_cap(params: &FundParams, policy: &LeveragePolicy, sigma2_tau: f64) -> f64 {
    match *policy {
        LeveragePolicy::Fixed => params.lambda_max,
        LeveragePolicy::VolatilityAdjusted { kappa, .. } => {
            let adjusted = params.lambda_max / (1.0 + kappa * sigma2_tau.max(0.0));
            adjusted.max(1.0).min(params.lambda_max)
        }
    }
}

/// True when carried holdings at the new price exceed the cap on `wealth`.
/// A non-positive wealth with a long position counts as a call the fund cannot meet.
pub fn margin_call_flag(shares_prev: f64, p: f64, wealth: f64, cap: f64) -> bool {
    if shares_prev <= 0.0 {
        return false;
    }
    match leverage(shares_prev, p, wealth) {
        Some(l) => l > cap,
        None => true,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn cfg() -> ModelConfig {
        ModelConfig::default()
    }

    #[test]
    fn noise_trader_examples() {
        let c = cfg();
        assert_relative_eq!(
            noise_trader_step(1000.0, 0.0, &c).unwrap(),
            1000.0,
            max_relative = 1e-12
        );
        let oracle = 1000.0 * (0.035f64).exp();
        assert_relative_eq!(
            noise_trader_step(1000.0, 1.0, &c).unwrap(),
            oracle,
            max_relative = 1e-12
        );
        assert_relative_eq!(oracle, 1035.62, epsilon = 0.01);
        let oracle = (0.99 * 500f64.ln() + 0.01 * 1000f64.ln()).exp();
        assert_relative_eq!(
            noise_trader_step(500.0, 0.0, &c).unwrap(),
            oracle,
            max_relative = 1e-12
        );
        assert_relative_eq!(oracle, 503.47, epsilon = 0.01);
    }

    #[test]
    fn noise_trader_rejects_bad_input() {
        let c = cfg();
        assert!(noise_trader_step(f64::NAN, 0.0, &c).is_err());
        assert!(noise_trader_step(0.0, 0.0, &c).is_err());
        assert!(noise_trader_step(1.0, f64::INFINITY, &c).is_err());
    }

    #[test]
    fn demand_examples() {
        let p = FundParams::new(10.0, 10.0);
        assert_eq!(fund_demand(-0.1, 5.0, 1.1, &p, 10.0).unwrap(), 0.0);
        let d = fund_demand(0.05, 2.0, 0.95, &p, 10.0).unwrap();
        assert_relative_eq!(d, 10.0 * 0.05 * 2.0 / 0.95, max_relative = 1e-14);
        assert_relative_eq!(d, 1.05263, epsilon = 1e-5);
        let d = fund_demand(0.3, 1.0, 0.7, &p, 2.0).unwrap();
        assert_relative_eq!(d, 2.0 / 0.7, max_relative = 1e-14);
        assert_relative_eq!(d * 0.7, 2.0, max_relative = 1e-14);
        assert!(fund_demand(0.1, 1.0, 0.0, &p, 2.0).is_err());
    }

    #[test]
    fn tie_at_critical_mispricing_goes_to_cap() {
        let p = FundParams::new(4.0, 2.0);
        assert_eq!(target_exposure(0.5, &p, 2.0), 2.0);
    }

    #[test]
    fn leverage_examples() {
        assert_eq!(leverage(0.0, 1.0, 2.0), Some(0.0));
        assert_eq!(leverage(2.0, 1.0, 1.0), Some(2.0));
        // fully invested, no cash
        assert_eq!(leverage(3.0, 0.7, 3.0 * 0.7), Some(1.0));
        assert_eq!(leverage(1.0, 1.0, 0.0), None);
    }

    #[test]
    fn performance_examples() {
        assert_relative_eq!(performance_update(0.3, 0.3, 0.1), 0.3, max_relative = 1e-12);
        assert_relative_eq!(
            performance_update(0.0, 0.1, 0.1),
            0.01,
            max_relative = 1e-12
        );
        assert_relative_eq!(
            performance_update(0.02, -0.01, 0.1),
            0.017,
            max_relative = 1e-12
        );
    }

    #[test]
    fn flow_examples() {
        let f = FlowParams::from(&cfg());
        assert_eq!(capital_flow(0.005, 10.0, &f), 0.0);
        assert_relative_eq!(capital_flow(0.105, 10.0, &f), 0.15, max_relative = 1e-12);
        assert_eq!(capital_flow(0.005 - 10.0, 1.0, &f), -1.0);
    }

    #[test]
    fn wealth_examples() {
        assert_eq!(wealth_update(3.0, 2.0, 0.9, 0.9, 0.0), 3.0);
        assert_relative_eq!(
            wealth_update(3.0, 1.0, 0.8, 0.9, 0.0),
            2.9,
            max_relative = 1e-12
        );
        assert_eq!(wealth_update(3.0, 0.0, 0.8, 0.9, 0.5), 3.5);
    }

    #[test]
    fn lifecycle_examples() {
        let c = cfg();
        let fund = FundState::fresh(FundParams::new(10.0, 10.0), 2.0);
        let (f, ev) = lifecycle_step(&fund, 0.15, 500, &c);
        assert_eq!(ev, Some(LifecycleEvent::Default));
        assert_eq!(f.status, FundStatus::Defaulted { reentry_time: 600 });
        assert_eq!((f.shares, f.cash), (0.0, 0.0));

        let (g, ev) = lifecycle_step(&fund, 0.25, 500, &c);
        assert_eq!(ev, None);
        assert!(g.is_active());
        assert_eq!(g.wealth, 0.25);

        let (h, ev) = lifecycle_step(&f, 0.0, 599, &c);
        assert_eq!(ev, None);
        assert_eq!(h, f);

        let (h, ev) = lifecycle_step(&f, 0.0, 600, &c);
        assert_eq!(ev, Some(LifecycleEvent::Rebirth));
        assert!(h.is_active());
        assert_eq!(h.wealth, 2.0);
        assert_eq!(h.shares, 0.0);
        assert_eq!(h.r_perf, 0.0);
        assert_eq!(h.params, fund.params);
        // a reborn fund holds its stake in cash
        assert_eq!(h.cash, 2.0);
    }

    #[test]
    fn threshold_is_strict() {
        let c = cfg();
        let fund = FundState::fresh(FundParams::new(10.0, 10.0), 2.0);
        let (f, ev) = lifecycle_step(&fund, c.survival_wealth(), 1, &c);
        assert!(f.is_active());
        assert!(ev.is_none());
    }

    #[test]
    fn cap_examples() {
        let p = FundParams::new(10.0, 10.0);
        let pol = LeveragePolicy::volatility_adjusted();
        assert_eq!(effective_cap(&p, &pol, 0.0), 10.0);
        assert_relative_eq!(effective_cap(&p, &pol, 0.01), 5.0, max_relative = 1e-12);
        assert_eq!(effective_cap(&p, &pol, 1.0), 1.0);
        assert_eq!(effective_cap(&p, &LeveragePolicy::Fixed, 1.0), 10.0);
    }

    #[test]
    fn margin_call_examples() {
        assert!(!margin_call_flag(0.0, 1.0, 1.0, 2.0));
        assert!(margin_call_flag(3.0, 1.0, 1.0, 2.0));
        assert!(!margin_call_flag(2.0, 1.0, 1.0, 2.0));
    }

    /// Random unlevered trajectories: with the cap at one, cash never goes
    /// negative and no margin call is ever flagged.
    #[test]
    fn unlevered_trajectories_never_call() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let params = FundParams::new(25.0, 1.0);
        for _ in 0..200 {
            let mut fund = FundState::fresh(params, 2.0);
            let mut p_prev = 1.0;
            for _ in 0..500 {
                let p: f64 = p_prev * (rng.random::<f64>() * 0.2 - 0.1).exp();
                let w_mtm = fund.value_at(p);
                assert!(!margin_call_flag(fund.shares, p, w_mtm, 1.0));
                let exposure = target_exposure(1.0 - p, &params, 1.0);
                fund.wealth = w_mtm;
                fund.shares = exposure * w_mtm / p;
                fund.cash = w_mtm * (1.0 - exposure);
                assert!(fund.cash >= 0.0);
                p_prev = p;
            }
        }
    }

    proptest! {
        #[test]
        fn demand_long_only_and_capped(
            m in -2.0f64..2.0,
            wealth in 1e-6f64..1e4,
            p in 1e-3f64..10.0,
            beta in 0.1f64..100.0,
            lambda_max in 1.0f64..50.0,
            frac in 0.0f64..1.0,
        ) {
            let params = FundParams::new(beta, lambda_max);
            let cap = 1.0 + frac * (lambda_max - 1.0);
            let d = fund_demand(m, wealth, p, &params, cap).unwrap();
            prop_assert!(d >= 0.0);
            prop_assert!(d * p / wealth <= cap + 1e-12);
        }

        #[test]
        fn flow_never_below_floor(r in -10.0f64..10.0, v in 0.0f64..1e3) {
            let f = FlowParams::from(&ModelConfig::default());
            prop_assert!(capital_flow(r, v, &f) >= -v);
        }

        #[test]
        fn cap_monotone_and_bounded(s1 in 0.0f64..10.0, s2 in 0.0f64..10.0, lm in 1.0f64..50.0, kappa in 0.0f64..1e3) {
            let p = FundParams::new(10.0, lm);
            let pol = LeveragePolicy::VolatilityAdjusted { kappa, tau: 10 };
            let (lo, hi) = if s1 <= s2 { (s1, s2) } else { (s2, s1) };
            let c_lo = effective_cap(&p, &pol, lo);
            let c_hi = effective_cap(&p, &pol, hi);
            prop_assert!(c_hi <= c_lo);
            prop_assert!((1.0..=lm).contains(&c_lo) && (1.0..=lm).contains(&c_hi));
        }
    }

    #[test]
    fn noise_trader_log_mean_reverts_to_anchor() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let c = cfg();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut xi = c.fundamental_value * c.supply;
        let n = 400_000;
        let burn = 1_000;
        let mut logs = Vec::with_capacity(n);
        for i in 0..n + burn {
            let chi: f64 = StandardNormal.sample(&mut rng);
            xi = noise_trader_step(xi, chi, &c).unwrap();
            if i >= burn {
                logs.push(xi.ln());
            }
        }
        let mean = logs.iter().sum::<f64>() / n as f64;
        // AR(1) with rho: stationary sd sigma/sqrt(1-rho^2), effective sample
        // size n (1-rho)/(1+rho).
        let sd = c.sigma / (1.0 - c.rho * c.rho).sqrt();
        let n_eff = n as f64 * (1.0 - c.rho) / (1.0 + c.rho);
        let se = sd / n_eff.sqrt();
        let target = (c.fundamental_value * c.supply).ln();
        assert!(
            (mean - target).abs() < 3.0 * se,
            "mean {mean} target {target} se {se}"
        );
    }
}
