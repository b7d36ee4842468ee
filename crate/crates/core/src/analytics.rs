//! Closed-form diagnostics: how fund demand responds to a change in
//! mispricing, and the approximate factors by which funds damp or amplify
//! price volatility.

use serde::{Deserialize, Serialize};

use crate::config::FundParams;
use crate::error::{Error, Result};
use crate::model::fund_demand;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    BelowCap,
    AboveCap,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerivativePoint {
    pub m: f64,
    pub dd_dm_per_wealth: f64,
    pub regime: Regime,
}

/// `dD/dm / W` for a fund whose previous holdings were formed at mispricing
/// `m` and that has had no flows since.
///
/// Below the cap this is `beta (V - beta m^2) / (V - m)^2`; at or above it,
/// `lambda (1 - lambda) / (V - m)^2`. Pass `f64::INFINITY` for an uncapped fund.
pub fn demand_derivative(m: f64, beta: f64, lambda_max: f64, v: f64) -> Result<DerivativePoint> {
    if !(m >= 0.0 && m < v) {
        return Err(Error::InvalidInput(format!(
            "mispricing {m} outside [0, V={v})"
        )));
    }
    if !(beta > 0.0) {
        return Err(Error::InvalidInput(format!("beta must be > 0, got {beta}")));
    }
    let gap2 = (v - m).powi(2);
    let m_crit = lambda_max / beta;
    if m >= m_crit {
        Ok(DerivativePoint {
            m,
            dd_dm_per_wealth: lambda_max * (1.0 - lambda_max) / gap2,
            regime: Regime::AboveCap,
        })
    } else {
        Ok(DerivativePoint {
            m,
            dd_dm_per_wealth: beta * (v - beta * m * m) / gap2,
            regime: Regime::BelowCap,
        })
    }
}

/// Central finite difference of [`fund_demand`] around `m`, per unit wealth,
/// for a fund whose holdings were set at `m` with wealth 1: position
/// `min(beta m, lambda)` in the asset and the remainder in cash.
pub fn demand_derivative_fd(m: f64, beta: f64, lambda_max: f64, v: f64, h: f64) -> f64 {
    let params = FundParams::new(beta, lambda_max);
    let p0 = v - m;
    let exposure = if m >= lambda_max / beta {
        lambda_max
    } else {
        beta * m
    };
    let shares = exposure / p0;
    let cash = 1.0 - exposure;
    let demand = |mm: f64| {
        let p = v - mm;
        let wealth = shares * p + cash;
        fund_demand(mm, wealth, p, &params, lambda_max).expect("price stays positive")
    };
    (demand(m + h) - demand(m - h)) / (2.0 * h)
}

/// Approximate volatility damping by an unlevered fund,
/// `1 / (1 + beta (C + D V) / N)`. Absent where the denominator is not positive.
pub fn damping_factor(beta: f64, supply: f64, cash: f64, shares: f64, v: f64) -> Option<f64> {
    if !(supply > 0.0) {
        return None;
    }
    let denom = 1.0 + beta / supply * (cash + shares * v);
    (denom > 0.0).then(|| 1.0 / denom)
}

/// Approximate volatility amplification by funds at their cap,
/// `1 / (1 - lambda V / N)`. Absent at and beyond the pole.
pub fn amplification_factor(lambda_max: f64, v: f64, supply: f64) -> Option<f64> {
    if !(supply > 0.0) {
        return None;
    }
    let x = lambda_max * v / supply;
    (x < 1.0).then(|| 1.0 / (1.0 - x))
}

/// Mispricing where the below-cap derivative changes sign, `sqrt(V / beta)`.
pub fn buy_sell_boundary(beta: f64, v: f64) -> f64 {
    (v / beta).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn derivative_examples() {
        let d = demand_derivative(0.0, 10.0, 1.0, 1.0).unwrap();
        assert_eq!(d.dd_dm_per_wealth, 10.0);
        assert_eq!(d.regime, Regime::BelowCap);

        let d = demand_derivative(0.5, 10.0, 1.0, 1.0).unwrap();
        assert_eq!(d.dd_dm_per_wealth, 0.0);
        assert_eq!(d.regime, Regime::AboveCap);

        let d = demand_derivative(0.4, 10.0, 3.0, 1.0).unwrap();
        assert_relative_eq!(d.dd_dm_per_wealth, -6.0 / 0.36, max_relative = 1e-12);
        assert_relative_eq!(d.dd_dm_per_wealth, -16.67, epsilon = 0.01);
    }

    #[test]
    fn derivative_at_m_crit_uses_capped_branch() {
        let d = demand_derivative(0.25, 8.0, 2.0, 1.0).unwrap();
        assert_eq!(d.regime, Regime::AboveCap);
    }

    #[test]
    fn uncapped_fund_never_binds() {
        for i in 0..60 {
            let m = i as f64 * 0.01;
            assert_eq!(
                demand_derivative(m, 10.0, f64::INFINITY, 1.0)
                    .unwrap()
                    .regime,
                Regime::BelowCap
            );
        }
    }

    #[test]
    fn derivative_rejects_out_of_domain() {
        assert!(demand_derivative(1.0, 10.0, 2.0, 1.0).is_err());
        assert!(demand_derivative(-0.1, 10.0, 2.0, 1.0).is_err());
    }

    #[test]
    fn damping_examples() {
        assert_eq!(damping_factor(0.0, 1000.0, 1.0, 1.0, 1.0), Some(1.0));
        assert_relative_eq!(
            damping_factor(10.0, 1000.0, 1.0, 1.0, 1.0).unwrap(),
            1.0 / 1.02,
            max_relative = 1e-12
        );
        assert_eq!(damping_factor(10.0, 1000.0, -1.0, 1.0, 1.0), Some(1.0));
        assert_eq!(damping_factor(10.0, 1000.0, -200.0, 0.0, 1.0), None);
    }

    #[test]
    fn amplification_examples() {
        assert_relative_eq!(
            amplification_factor(10.0, 1.0, 1000.0).unwrap(),
            1.0 / 0.99,
            max_relative = 1e-12
        );
        assert_eq!(amplification_factor(0.0, 1.0, 1000.0), Some(1.0));
        assert_eq!(amplification_factor(1000.0, 1.0, 1000.0), None);
        assert!(amplification_factor(999.999, 1.0, 1000.0).unwrap() > 1e5);
    }

    #[test]
    fn sign_change_at_sqrt_v_over_beta() {
        let beta = 16.0;
        let b = buy_sell_boundary(beta, 1.0);
        assert_eq!(b, 0.25);
        let lam = f64::INFINITY;
        assert!(
            demand_derivative(b - 1e-6, beta, lam, 1.0)
                .unwrap()
                .dd_dm_per_wealth
                > 0.0
        );
        assert!(
            demand_derivative(b + 1e-6, beta, lam, 1.0)
                .unwrap()
                .dd_dm_per_wealth
                < 0.0
        );
    }

    proptest! {
        #[test]
        fn matches_finite_differences(m in 0.001f64..0.95, beta in 1.0f64..50.0, lam in 1.0f64..20.0) {
            prop_assume!((m - lam / beta).abs() > 1e-3);
            let an = demand_derivative(m, beta, lam, 1.0).unwrap().dd_dm_per_wealth;
            let fd = demand_derivative_fd(m, beta, lam, 1.0, 1e-6);
            prop_assert!((fd - an).abs() <= 1e-6 * an.abs().max(1.0), "m={} beta={} lam={} an={} fd={}", m, beta, lam, an, fd);
        }

        #[test]
        fn leveraged_funds_sell_above_cap(beta in 1.0f64..50.0, lam in 1.0001f64..20.0, frac in 0.0f64..1.0) {
            let m_crit = lam / beta;
            prop_assume!(m_crit < 0.99);
            let m = m_crit + frac * (0.99 - m_crit);
            prop_assert!(demand_derivative(m, beta, lam, 1.0).unwrap().dd_dm_per_wealth < 0.0);
        }
    }
}
