//! The per-period simulation loop.
//!
//! Each step draws the noise, sets this period's leverage caps from the
//! trailing variance, re-admits funds whose waiting time is over, clears the
//! market, settles every fund at the clearing price, closes funds that fell
//! below the survival threshold and finally lets the survivors rebalance.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::clearing::{
    clear_price, settle, sign_changes, ClearingFund, ClearingProblem, SolverSettings,
};
use crate::config::{LeveragePolicy, ModelConfig, VarianceSource};
use crate::error::{Error, Result};
use crate::model::{
    effective_cap, lifecycle_step, margin_call_flag, noise_trader_step, target_exposure, FundState,
    LifecycleEvent,
};
use crate::rng::{NoiseSource, RNG_ALGORITHM};
use crate::stats::{summary, RunSummary};

/// Per-fund observables for one period, taken after rebalancing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FundRecord {
    pub wealth: f64,
    pub shares: f64,
    pub cash: f64,
    pub leverage: f64,
    /// Carried holdings exceeded the cap at this period's price.
    pub margin_call: bool,
    /// The fund was closed this period.
    pub defaulted: bool,
    pub flow: f64,
    /// Return on last period's wealth.
    pub ret: f64,
    pub r_perf: f64,
    pub cap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: u64,
    pub price: f64,
    pub log_return: f64,
    pub xi: f64,
    pub chi: f64,
    /// `V - price`.
    pub mispricing: f64,
    pub aggregate_leverage: f64,
    pub residual: f64,
    pub funds: Vec<FundRecord>,
}

impl StepRecord {
    pub fn any_margin_call(&self) -> bool {
        self.funds.iter().any(|f| f.margin_call)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Default,
    Rebirth,
    MarginCall,
}

impl EventKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EventKind::Default => "default",
            EventKind::Rebirth => "rebirth",
            EventKind::MarginCall => "margin_call",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub t: u64,
    pub fund: usize,
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub solver: SolverSettings,
    pub rng: String,
    /// `"generator"` or `"replay"`.
    pub noise: String,
    pub version: String,
    /// Steps whose excess demand had more than one sign change; only counted
    /// when root scanning is enabled.
    pub multi_root_steps: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifact {
    pub config: ModelConfig,
    pub records: Vec<StepRecord>,
    pub events: Vec<Event>,
    pub summary: RunSummary,
    pub provenance: Provenance,
}

impl RunArtifact {
    /// Price series including the initial price.
    pub fn prices(&self) -> Vec<f64> {
        std::iter::once(self.config.fundamental_value)
            .chain(self.records.iter().map(|r| r.price))
            .collect()
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub solver: SolverSettings,
    /// Replay these draws instead of the seeded generator.
    pub draws: Option<Vec<f64>>,
    /// Count sign changes of the excess demand on a 1024-point grid each step.
    pub scan_roots: bool,
}

pub struct Simulation {
    cfg: ModelConfig,
    solver: SolverSettings,
    noise: NoiseSource,
    scan_roots: bool,
    multi_root_steps: u64,
    pub t: u64,
    pub price: f64,
    pub xi: f64,
    pub funds: Vec<FundState>,
    window: VecDeque<f64>,
}

impl Simulation {
    /// Initial conditions: `xi = V N`, `p = V`, every fund active with the
    /// initial wealth held in cash.
    pub fn new(cfg: ModelConfig, options: &RunOptions) -> Result<Self> {
        cfg.validate()?;
        let noise = match &options.draws {
            Some(d) => NoiseSource::replay(d.clone()),
            None => NoiseSource::seeded(cfg.seed),
        };
        let funds = cfg
            .funds
            .iter()
            .map(|p| FundState::fresh(*p, cfg.initial_wealth))
            .collect();
        Ok(Self {
            price: cfg.fundamental_value,
            xi: cfg.fundamental_value * cfg.supply,
            solver: options.solver,
            scan_roots: options.scan_roots,
            multi_root_steps: 0,
            noise,
            t: 0,
            funds,
            window: VecDeque::new(),
            cfg,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Variance of the trailing window; zero until two observations exist.
    fn trailing_variance(&self) -> f64 {
        let n = self.window.len();
        if n < 2 {
            return 0.0;
        }
        let mean = self.window.iter().sum::<f64>() / n as f64;
        self.window.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
    }

    fn push_window(&mut self, log_return: f64, price: f64) {
        let LeveragePolicy::VolatilityAdjusted { tau, .. } = self.cfg.policy else {
            return;
        };
        self.window.push_back(match self.cfg.variance_source {
            VarianceSource::LogReturn => log_return,
            VarianceSource::Price => price,
        });
        while self.window.len() > tau {
            self.window.pop_front();
        }
    }

    /// Advances one period, appending any events to `events`.
    pub fn step(&mut self, events: &mut Vec<Event>) -> Result<StepRecord> {
        let t = self.t + 1;
        let chi = self.noise.next_chi()?;
        let xi = noise_trader_step(self.xi, chi, &self.cfg)?;

        let sigma2 = self.trailing_variance();
        let caps: Vec<f64> = self
            .funds
            .iter()
            .map(|f| effective_cap(&f.params, &self.cfg.policy, sigma2))
            .collect();

        for (h, fund) in self.funds.iter_mut().enumerate() {
            if !fund.is_active() {
                let (next, ev) = lifecycle_step(fund, 0.0, t, &self.cfg);
                if ev == Some(LifecycleEvent::Rebirth) {
                    events.push(Event {
                        t,
                        fund: h,
                        kind: EventKind::Rebirth,
                    });
                }
                *fund = next;
            }
        }

        let prob = ClearingProblem::new(
            &self.cfg,
            xi,
            self.price,
            self.funds
                .iter()
                .zip(&caps)
                .map(|(state, &cap)| ClearingFund { state: *state, cap })
                .collect(),
        );
        let (lo, hi) = prob.default_bracket();
        let cleared = clear_price(&prob, &self.solver, lo, hi)
            .map_err(|e| Error::Clearing(format!("t={t} seed={}: {e}", self.cfg.seed)))?;
        if self.scan_roots && sign_changes(&prob, lo, hi, 1024)? > 1 {
            self.multi_root_steps += 1;
        }
        let p = cleared.price;
        let m = self.cfg.fundamental_value - p;

        let mut records = Vec::with_capacity(self.funds.len());
        let (mut exposure_sum, mut wealth_sum) = (0.0, 0.0);
        for (h, fund) in self.funds.iter_mut().enumerate() {
            let cap = caps[h];
            if !fund.is_active() {
                records.push(FundRecord {
                    wealth: 0.0,
                    shares: 0.0,
                    cash: 0.0,
                    leverage: 0.0,
                    margin_call: false,
                    defaulted: false,
                    flow: 0.0,
                    ret: 0.0,
                    r_perf: 0.0,
                    cap,
                });
                continue;
            }
            let s = settle(fund, p, &prob);
            let margin_call = margin_call_flag(fund.shares, p, s.marked_wealth, cap);
            if margin_call {
                events.push(Event {
                    t,
                    fund: h,
                    kind: EventKind::MarginCall,
                });
            }
            let (mut next, ev) = lifecycle_step(fund, s.wealth, t, &self.cfg);
            let defaulted = ev == Some(LifecycleEvent::Default);
            if defaulted {
                events.push(Event {
                    t,
                    fund: h,
                    kind: EventKind::Default,
                });
            } else {
                let exposure = target_exposure(m, &next.params, cap);
                next.r_perf = s.r_perf;
                next.shares = exposure * next.wealth / p;
                next.cash = next.wealth * (1.0 - exposure);
                exposure_sum += exposure * next.wealth;
                wealth_sum += next.wealth;
            }
            *fund = next;
            records.push(FundRecord {
                wealth: next.wealth,
                shares: next.shares,
                cash: next.cash,
                leverage: if next.wealth > 0.0 {
                    next.shares * p / next.wealth
                } else {
                    0.0
                },
                margin_call,
                defaulted,
                flow: s.flow,
                ret: s.r,
                r_perf: next.r_perf,
                cap,
            });
        }

        let log_return = p.ln() - self.price.ln();
        self.push_window(log_return, p);
        self.t = t;
        self.price = p;
        self.xi = xi;

        Ok(StepRecord {
            t,
            price: p,
            log_return,
            xi,
            chi,
            mispricing: m,
            aggregate_leverage: if wealth_sum > 0.0 {
                exposure_sum / wealth_sum
            } else {
                0.0
            },
            residual: cleared.residual,
            funds: records,
        })
    }

    fn provenance(&self, replay: bool) -> Provenance {
        Provenance {
            seed: self.cfg.seed,
            solver: self.solver,
            rng: RNG_ALGORITHM.to_string(),
            noise: if replay { "replay" } else { "generator" }.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            multi_root_steps: self.scan_roots.then_some(self.multi_root_steps),
        }
    }
}

/// Runs the configured horizon from the initial conditions with the seeded generator.
pub fn run(cfg: &ModelConfig) -> Result<RunArtifact> {
    run_with(cfg, &RunOptions::default())
}

pub fn run_with(cfg: &ModelConfig, options: &RunOptions) -> Result<RunArtifact> {
    let mut sim = Simulation::new(cfg.clone(), options)?;
    let mut records = Vec::with_capacity(cfg.horizon as usize);
    let mut events = Vec::new();
    for _ in 0..cfg.horizon {
        records.push(sim.step(&mut events)?);
    }
    let summary = summary(cfg, &records);
    Ok(RunArtifact {
        config: cfg.clone(),
        provenance: sim.provenance(options.draws.is_some()),
        records,
        events,
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{standard_roster, FundParams};

    fn short(funds: Vec<FundParams>, horizon: u64, seed: u64) -> ModelConfig {
        ModelConfig::default()
            .with_funds(funds)
            .with_horizon(horizon)
            .with_seed(seed)
    }

    #[test]
    fn noise_only_price_is_xi_over_n() {
        let cfg = short(vec![], 1000, 3);
        let art = run(&cfg).unwrap();
        assert_eq!(art.records.len(), 1000);
        for r in &art.records {
            assert!((r.price - r.xi / cfg.supply).abs() <= 1e-10 * r.price);
        }
    }

    #[test]
    fn zero_horizon() {
        let art = run(&short(standard_roster(10.0), 0, 1)).unwrap();
        assert!(art.records.is_empty());
        assert!(art.summary.volatility.is_none());
        assert!(art.summary.mean_price.is_none());
    }

    #[test]
    fn bit_identical_reruns() {
        let cfg = short(standard_roster(10.0), 3000, 9);
        let a = run(&cfg).unwrap();
        let b = run(&cfg).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.events, b.events);
    }

    #[test]
    fn accounting_and_share_conservation() {
        let cfg = short(standard_roster(10.0), 20_000, 4);
        let art = run(&cfg).unwrap();
        for r in &art.records {
            let mut held = r.xi / r.price;
            for f in &r.funds {
                let identity = f.shares * r.price + f.cash;
                assert!((identity - f.wealth).abs() <= 1e-9 * f.wealth.abs().max(1.0));
                assert!(f.shares >= 0.0);
                held += f.shares;
            }
            assert!((held - cfg.supply).abs() <= 1e-6, "t={} held {held}", r.t);
        }
    }

    #[test]
    fn events_match_flags() {
        let cfg = short(standard_roster(20.0), 20_000, 2);
        let art = run(&cfg).unwrap();
        let mut from_flags = Vec::new();
        for r in &art.records {
            for (h, f) in r.funds.iter().enumerate() {
                if f.margin_call {
                    from_flags.push((r.t, h, EventKind::MarginCall));
                }
                if f.defaulted {
                    from_flags.push((r.t, h, EventKind::Default));
                }
            }
        }
        let logged: Vec<_> = art
            .events
            .iter()
            .filter(|e| e.kind != EventKind::Rebirth)
            .map(|e| (e.t, e.fund, e.kind))
            .collect();
        assert_eq!(logged, from_flags);
        // every default is followed by a rebirth after the delay, inside the horizon
        for e in art.events.iter().filter(|e| e.kind == EventKind::Default) {
            let due = e.t + cfg.reintro_delay;
            if due <= cfg.horizon {
                assert!(art
                    .events
                    .iter()
                    .any(|r| r.kind == EventKind::Rebirth && r.fund == e.fund && r.t == due));
            }
        }
    }

    #[test]
    fn unlevered_run_has_no_margin_calls() {
        let cfg = short(standard_roster(1.0), 100_000, 5);
        let art = run(&cfg).unwrap();
        for r in &art.records {
            for f in &r.funds {
                assert!(!f.margin_call);
                assert!(f.cash >= 0.0);
            }
        }
    }

    #[test]
    fn adding_funds_keeps_the_noise_path() {
        let a = run(&short(vec![], 500, 8)).unwrap();
        let b = run(&short(standard_roster(10.0), 500, 8)).unwrap();
        for (x, y) in a.records.iter().zip(&b.records) {
            assert_eq!(x.chi.to_bits(), y.chi.to_bits());
            assert_eq!(x.xi.to_bits(), y.xi.to_bits());
        }
    }

    #[test]
    fn replayed_draws_reproduce_generator_run() {
        let cfg = short(standard_roster(10.0), 2000, 21);
        let a = run(&cfg).unwrap();
        let draws = crate::rng::draw_series(21, 2000);
        let b = run_with(
            &cfg,
            &RunOptions {
                draws: Some(draws),
                ..RunOptions::default()
            },
        )
        .unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(b.provenance.noise, "replay");
    }

    #[test]
    fn adaptive_caps_stay_in_range() {
        let cfg = short(standard_roster(10.0), 5000, 6)
            .with_policy(LeveragePolicy::volatility_adjusted());
        let art = run(&cfg).unwrap();
        assert!(art
            .records
            .iter()
            .flat_map(|r| &r.funds)
            .all(|f| (1.0..=10.0).contains(&f.cap)));
        // calm start: the first step uses the full cap
        assert!(art.records[0].funds.iter().all(|f| f.cap == 10.0));
    }
}
