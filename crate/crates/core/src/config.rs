//! Exogenous model parameters.
//!
//! JSON keys follow the conventional symbol names (`V`, `N`, `sigma`, `W0`,
//! `T_reintro`, ...). Every field has a default, so an empty object yields the
//! standard configuration: ten funds with aggression 5, 10, ..., 50.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One fund's strategy parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FundParams {
    /// Aggression: demand per unit mispricing per unit wealth.
    pub beta: f64,
    /// Leverage cap imposed by the lending bank.
    pub lambda_max: f64,
}

impl FundParams {
    pub fn new(beta: f64, lambda_max: f64) -> Self {
        Self { beta, lambda_max }
    }

    /// Mispricing at which the cap binds.
    pub fn critical_mispricing(&self) -> f64 {
        self.lambda_max / self.beta
    }
}

/// How the bank sets the leverage cap each period.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LeveragePolicy {
    Fixed,
    /// `max(1, lambda_max / (1 + kappa * var))` with `var` measured over the
    /// trailing `tau` periods.
    VolatilityAdjusted {
        kappa: f64,
        tau: usize,
    },
}

impl LeveragePolicy {
    pub fn volatility_adjusted() -> Self {
        LeveragePolicy::VolatilityAdjusted {
            kappa: 100.0,
            tau: 10,
        }
    }
}

/// Which series the volatility-adjusted policy takes the variance of.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceSource {
    LogReturn,
    #[default]
    Price,
}

/// Whether investor flows are evaluated at the candidate clearing price or
/// from last period's performance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowTiming {
    /// Flows depend on the period-t return, so they enter the clearing fixed point.
    #[default]
    Contemporaneous,
    /// Flows use the period t-1 performance and fund value at the previous price.
    Lagged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Perceived fundamental value.
    #[serde(rename = "V")]
    pub fundamental_value: f64,
    /// Total share supply.
    #[serde(rename = "N")]
    pub supply: f64,
    pub sigma: f64,
    pub rho: f64,
    pub funds: Vec<FundParams>,
    /// Weight of the newest return in the performance average.
    pub a: f64,
    /// Sensitivity of investor flows to excess performance.
    pub b: f64,
    /// Benchmark return per period.
    pub r_b: f64,
    #[serde(rename = "W0")]
    pub initial_wealth: f64,
    pub survival_fraction: f64,
    #[serde(rename = "T_reintro")]
    pub reintro_delay: u64,
    pub policy: LeveragePolicy,
    pub variance_source: VarianceSource,
    pub flow_timing: FlowTiming,
    #[serde(rename = "T")]
    pub horizon: u64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            fundamental_value: 1.0,
            supply: 1000.0,
            sigma: 0.035,
            rho: 0.99,
            funds: standard_roster(10.0),
            a: 0.1,
            b: 0.15,
            r_b: 0.005,
            initial_wealth: 2.0,
            survival_fraction: 0.1,
            reintro_delay: 100,
            policy: LeveragePolicy::Fixed,
            variance_source: VarianceSource::Price,
            flow_timing: FlowTiming::Contemporaneous,
            horizon: 100_000,
            seed: 0,
        }
    }
}

/// Ten funds with aggression 5, 10, ..., 50 and a common leverage cap.
pub fn standard_roster(lambda_max: f64) -> Vec<FundParams> {
    (1..=10)
        .map(|i| FundParams::new(5.0 * i as f64, lambda_max))
        .collect()
}

impl ModelConfig {
    /// Wealth below which a fund is closed.
    pub fn survival_wealth(&self) -> f64 {
        self.survival_fraction * self.initial_wealth
    }

    pub fn with_funds(mut self, funds: Vec<FundParams>) -> Self {
        self.funds = funds;
        self
    }

    pub fn with_horizon(mut self, horizon: u64) -> Self {
        self.horizon = horizon;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_policy(mut self, policy: LeveragePolicy) -> Self {
        self.policy = policy;
        self
    }

    /// Checks every parameter invariant, naming the offending key on failure.
    pub fn validate(&self) -> Result<()> {
        fn finite(key: &str, v: f64) -> Result<()> {
            if v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(key, "must be finite"))
            }
        }

        finite("V", self.fundamental_value)?;
        finite("N", self.supply)?;
        finite("sigma", self.sigma)?;
        finite("rho", self.rho)?;
        finite("a", self.a)?;
        finite("b", self.b)?;
        finite("r_b", self.r_b)?;
        finite("W0", self.initial_wealth)?;
        finite("survival_fraction", self.survival_fraction)?;

        if self.fundamental_value <= 0.0 {
            return Err(Error::config("V", "must be > 0"));
        }
        if self.supply <= 0.0 {
            return Err(Error::config("N", "must be > 0"));
        }
        if self.sigma < 0.0 {
            return Err(Error::config("sigma", "must be >= 0"));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::config("rho", "must lie in (0, 1]"));
        }
        if !(self.a > 0.0 && self.a < 1.0) {
            return Err(Error::config("a", "must lie in (0, 1)"));
        }
        if self.b < 0.0 {
            return Err(Error::config("b", "must be >= 0"));
        }
        if self.initial_wealth <= 0.0 {
            return Err(Error::config("W0", "must be > 0"));
        }
        if !(0.0..1.0).contains(&self.survival_fraction) {
            return Err(Error::config("survival_fraction", "must lie in [0, 1)"));
        }
        for (i, f) in self.funds.iter().enumerate() {
            if !(f.beta.is_finite() && f.beta > 0.0) {
                return Err(Error::config(format!("funds[{i}].beta"), "must be > 0"));
            }
            if !(f.lambda_max.is_finite() && f.lambda_max >= 1.0) {
                return Err(Error::config(
                    format!("funds[{i}].lambda_max"),
                    "leverage cap below 1",
                ));
            }
        }
        if let LeveragePolicy::VolatilityAdjusted { kappa, tau } = self.policy {
            if !(kappa.is_finite() && kappa >= 0.0) {
                return Err(Error::config("policy.kappa", "must be >= 0"));
            }
            if tau < 2 {
                return Err(Error::config("policy.tau", "must be >= 2"));
            }
        }
        Ok(())
    }
}
