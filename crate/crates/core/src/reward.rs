//! Quadratic portfolio reward, its closed-form expectation over sector
//! returns, and the multiplicative state transition.

use nalgebra::DVector;

use crate::error::{ensure_len, Error, Result};
use crate::types::{Covariance, FundTrajectory, RewardParams};

/// Target portfolio value: a blend of the benchmark and the current
/// portfolio grown at rate `eta`.
pub fn target_value(x: &DVector<f64>, benchmark: f64, params: &RewardParams) -> f64 {
    params.rho * benchmark + (1.0 - params.rho) * params.eta * x.sum()
}

/// The pieces of one step's reward, kept separate so parameter
/// derivatives can be formed without re-deriving the expectation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardTerms {
    /// `target - (1 + r_bar)^T (x + u)`.
    pub tracking_gap: f64,
    /// `(x + u)^T Sigma (x + u)`.
    pub return_variance: f64,
    /// `1^T u - C`.
    pub flow_gap: f64,
    /// `u^T u`.
    pub trade_norm_sq: f64,
    /// `1^T x`, the pre-trade portfolio value.
    pub portfolio_value: f64,
}

impl RewardTerms {
    pub fn compute(
        x: &DVector<f64>,
        u: &DVector<f64>,
        params: &RewardParams,
        r_bar: &DVector<f64>,
        sigma: &Covariance,
        benchmark: f64,
        cashflow: f64,
    ) -> Result<Self> {
        let n = x.len();
        ensure_len("trade", u.len(), n)?;
        ensure_len("expected returns", r_bar.len(), n)?;
        ensure_len("covariance", sigma.dim(), n)?;
        let z = x + u;
        let grown: f64 = z.iter().zip(r_bar.iter()).map(|(zi, ri)| zi * (1.0 + ri)).sum();
        let return_variance = z.dot(&(sigma.matrix() * &z));
        Ok(Self {
            tracking_gap: target_value(x, benchmark, params) - grown,
            return_variance,
            flow_gap: u.sum() - cashflow,
            trade_norm_sq: u.norm_squared(),
            portfolio_value: x.sum(),
        })
    }

    pub fn reward(&self, params: &RewardParams) -> f64 {
        -(self.tracking_gap * self.tracking_gap + self.return_variance)
            - params.lam * self.flow_gap * self.flow_gap
            - params.omega * self.trade_norm_sq
    }

    /// Partial derivatives of the reward with respect to
    /// `(rho, eta, lam, omega)`.
    pub fn param_gradient(&self, params: &RewardParams, benchmark: f64) -> [f64; 4] {
        let d_target = -2.0 * self.tracking_gap;
        [
            d_target * (benchmark - params.eta * self.portfolio_value),
            d_target * (1.0 - params.rho) * self.portfolio_value,
            -self.flow_gap * self.flow_gap,
            -self.trade_norm_sq,
        ]
    }
}

/// Expected one-step reward with sector returns integrated out in closed
/// form: `E[(P - V)^2] = (P - (1+r_bar)^T z)^2 + z^T Sigma z` with `z = x + u`.
pub fn expected_reward(
    x: &DVector<f64>,
    u: &DVector<f64>,
    params: &RewardParams,
    r_bar: &DVector<f64>,
    sigma: &Covariance,
    benchmark: f64,
    cashflow: f64,
) -> Result<f64> {
    Ok(RewardTerms::compute(x, u, params, r_bar, sigma, benchmark, cashflow)?.reward(params))
}

/// `x_{t+1} = diag(1 + r) (x + u)`.
pub fn propagate_state(x: &DVector<f64>, u: &DVector<f64>, r: &DVector<f64>) -> Result<DVector<f64>> {
    ensure_len("trade", u.len(), x.len())?;
    ensure_len("returns", r.len(), x.len())?;
    Ok(DVector::from_iterator(
        x.len(),
        x.iter()
            .zip(u.iter())
            .zip(r.iter())
            .map(|((xi, ui), ri)| (1.0 + ri) * (xi + ui)),
    ))
}

/// Flow-adjusted total return: `(V_T - sum_t C_t - V_0) / V_0`.
pub fn realized_total_return(traj: &FundTrajectory) -> Result<f64> {
    traj.require_normalized()?;
    let v0 = traj.value(0);
    if v0 <= 0.0 {
        return Err(Error::Data(format!(
            "fund {}: initial portfolio value {v0} is not positive",
            traj.fund_id
        )));
    }
    let flows: f64 = traj.cashflow.iter().sum();
    Ok((traj.value(traj.horizon()) - flows - v0) / v0)
}
