//! Agent-based simulator of leveraged value investors with margin calls.
//!
//! Noise traders follow a mean-reverting log process; value-investing funds
//! buy when the asset trades below its fundamental value, borrowing up to a
//! leverage cap set by their bank. Margin calls force leveraged funds to sell
//! into falling prices, which turns Gaussian noise into fat-tailed,
//! volatility-clustered returns.

pub mod analytics;
pub mod clearing;
pub mod config;
pub mod engine;
pub mod error;
pub mod io;
pub mod model;
pub mod rng;
pub mod scenarios;
pub mod stats;
pub mod sweep;

pub use clearing::{ClearingProblem, ClearingResult, SolverSettings};
pub use config::{FlowTiming, FundParams, LeveragePolicy, ModelConfig, VarianceSource};
pub use engine::{run, run_with, Event, EventKind, RunArtifact, RunOptions, StepRecord};
pub use error::{Error, Result};
pub use model::{FundState, FundStatus};
pub use stats::{RunSummary, TailFit, TailSide};
