//! Return-ranked reward inference for portfolio managers and
//! KL-regularized sector allocation with the inferred reward.
//!
//! The pipeline has two stages. [`trex`] fits the four parameters of a
//! quadratic tracking reward so that cumulative rewards reproduce the
//! ranking of fund trajectories by realized return. [`glearner`] then solves
//! the finite-horizon control problem for that reward in closed form and
//! yields a Gaussian trading policy, which [`backtest`] rolls forward on
//! realized returns to compare against the managers.

pub mod backtest;
pub mod config;
pub mod error;
pub mod glearner;
pub mod io;
pub mod linalg;
pub mod market;
pub mod pipeline;
pub mod plot;
pub mod reward;
pub mod simgen;
pub mod trex;
pub mod types;

pub use backtest::{BacktestReport, FundBacktest, TradeRule};
pub use config::PipelineConfig;
pub use error::{Error, ErrorCategory, Result};
pub use glearner::{GaussianPolicy, GlearnerConfig, PolicyStep, PriorPolicy};
pub use trex::{FitResult, RankingMetrics, TrexConfig};
pub use types::{Covariance, FundTrajectory, MarketModel, RankedDemoSet, RewardParams, YearMonth};
