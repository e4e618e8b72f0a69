//! Counterfactual rollouts on realized returns and the resulting
//! outperformance curves against the demonstrating funds.

use nalgebra::{DMatrix, DVector};

use crate::error::{ensure_len, Error, Result};
use crate::glearner::{recommend, GaussianPolicy};
use crate::reward::propagate_state;
use crate::types::FundTrajectory;

/// Initial holdings of the two trajectories may differ by at most this.
pub const INITIAL_MATCH_TOL: f64 = 1e-9;

/// Anything that chooses a trade from the step index and current holdings.
pub trait TradeRule {
    fn horizon(&self) -> usize;
    fn trade(&self, t: usize, x: &DVector<f64>) -> DVector<f64>;
}

impl TradeRule for GaussianPolicy {
    fn horizon(&self) -> usize {
        GaussianPolicy::horizon(self)
    }

    fn trade(&self, t: usize, x: &DVector<f64>) -> DVector<f64> {
        recommend(&self.steps[t], x)
    }
}

/// Replays a fund's recorded trades regardless of state.
#[derive(Debug, Clone, Copy)]
pub struct Replay<'a>(pub &'a FundTrajectory);

impl TradeRule for Replay<'_> {
    fn horizon(&self) -> usize {
        self.0.horizon()
    }

    fn trade(&self, t: usize, _x: &DVector<f64>) -> DVector<f64> {
        self.0.trade(t)
    }
}

/// Roll `rule` forward from `x0` through `returns` (`T x N`, row `t` moves
/// the state from `t` to `t + 1`). Before each trade, `extra_cash[t]` is
/// invested pro rata to current holdings; pass zeros to trade exactly as the
/// rule says. Returns `(T+1) x N` holdings and trades.
pub fn counterfactual_rollout(
    rule: &impl TradeRule,
    x0: &DVector<f64>,
    returns: &DMatrix<f64>,
    extra_cash: &DVector<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (steps, n) = returns.shape();
    ensure_len("initial holdings", x0.len(), n)?;
    ensure_len("extra cash", extra_cash.len(), steps + 1)?;
    if rule.horizon() < steps {
        return Err(Error::Dimension(format!(
            "rule covers {} steps, returns cover {steps}",
            rule.horizon()
        )));
    }
    let mut holdings = DMatrix::zeros(steps + 1, n);
    let mut trades = DMatrix::zeros(steps + 1, n);
    let mut x = x0.clone();
    for t in 0..=steps {
        let mut u = rule.trade(t, &x);
        ensure_len("trade", u.len(), n)?;
        if extra_cash[t] != 0.0 {
            let value = x.sum();
            if !(value > 0.0) {
                return Err(Error::Data(format!(
                    "cannot allocate cash pro rata to portfolio value {value} at t={t}"
                )));
            }
            u += &x * (extra_cash[t] / value);
        }
        holdings.set_row(t, &x.transpose());
        trades.set_row(t, &u.transpose());
        if t < steps {
            x = propagate_state(&x, &u, &returns.row(t).transpose())?;
        }
    }
    Ok((holdings, trades))
}

/// The fund's counterfactual twin: same start, dates, benchmark and flows,
/// trades chosen by `rule`. Flows that differ from `planned_cashflow`, the
/// path the rule was built for, are invested pro rata before trading.
pub fn alter_ego(
    rule: &impl TradeRule,
    pm: &FundTrajectory,
    returns: &DMatrix<f64>,
    planned_cashflow: &DVector<f64>,
) -> Result<FundTrajectory> {
    ensure_len("planned cashflow", planned_cashflow.len(), pm.horizon() + 1)?;
    ensure_len("return rows", returns.nrows(), pm.horizon())?;
    let extra = &pm.cashflow - planned_cashflow;
    let (holdings, trades) = counterfactual_rollout(rule, &pm.state(0), returns, &extra)?;
    Ok(FundTrajectory {
        fund_id: pm.fund_id.clone(),
        dates: pm.dates.clone(),
        holdings,
        trades,
        benchmark: pm.benchmark.clone(),
        cashflow: pm.cashflow.clone(),
        normalized: pm.normalized,
    })
}

/// `1^T x_t` of `ae` minus that of `pm`, for every `t`.
pub fn outperformance(ae: &FundTrajectory, pm: &FundTrajectory) -> Result<Vec<f64>> {
    if ae.horizon() != pm.horizon() || ae.n_sectors() != pm.n_sectors() {
        return Err(Error::Dimension(format!(
            "alter ego is {}x{}, fund {} is {}x{}",
            ae.horizon(),
            ae.n_sectors(),
            pm.fund_id,
            pm.horizon(),
            pm.n_sectors()
        )));
    }
    let gap = (ae.state(0) - pm.state(0)).amax();
    if gap > INITIAL_MATCH_TOL {
        return Err(Error::Data(format!(
            "fund {}: initial holdings differ by {gap}",
            pm.fund_id
        )));
    }
    Ok((0..=pm.horizon()).map(|t| ae.value(t) - pm.value(t)).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FundBacktest {
    pub pm: FundTrajectory,
    pub ae: FundTrajectory,
    /// AE minus PM portfolio value.
    pub outperformance: Vec<f64>,
}

impl FundBacktest {
    pub fn new(pm: FundTrajectory, ae: FundTrajectory) -> Result<Self> {
        let outperformance = outperformance(&ae, &pm)?;
        Ok(Self { pm, ae, outperformance })
    }

    pub fn fund_id(&self) -> &str {
        &self.pm.fund_id
    }

    /// Outperformance in percent of the fund's value at each step.
    pub fn outperformance_pct(&self) -> Vec<f64> {
        self.outperformance
            .iter()
            .enumerate()
            .map(|(t, d)| 100.0 * d / self.pm.value(t))
            .collect()
    }

    pub fn final_outperformance(&self) -> f64 {
        *self
            .outperformance
            .last()
            .expect("trajectories have at least one state")
    }
}

/// All funds of a group over one evaluation window.
#[derive(Debug, Clone, PartialEq)]
pub struct BacktestReport {
    pub window: String,
    pub funds: Vec<FundBacktest>,
    /// Mean outperformance across funds per step.
    pub group_mean: Vec<f64>,
}

impl BacktestReport {
    pub fn new(window: impl Into<String>, funds: Vec<FundBacktest>) -> Result<Self> {
        let first = funds
            .first()
            .ok_or_else(|| Error::Data("backtest report needs at least one fund".into()))?;
        let len = first.outperformance.len();
        for f in &funds {
            ensure_len("outperformance series", f.outperformance.len(), len)?;
        }
        let group_mean = (0..len)
            .map(|t| funds.iter().map(|f| f.outperformance[t]).sum::<f64>() / funds.len() as f64)
            .collect();
        Ok(Self {
            window: window.into(),
            funds,
            group_mean,
        })
    }

    pub fn horizon(&self) -> usize {
        self.group_mean.len() - 1
    }
}
