//! Finite-horizon KL-regularized control with quadratic value functions.
//!
//! With the quadratic expected reward, a diagonal-return transition and a
//! Gaussian prior over trades, every quantity of the backward recursion
//! stays in closed form:
//!
//! * `G_t(x, u) = R_t(x, u) + gamma * E[F_{t+1}(diag(1 + r_t)(x + u))]`
//! * `F_t(x) = (1/beta) log E_{u ~ prior}[exp(beta * G_t(x, u))]`
//! * `pi_t(u | x) = prior(u) * exp(beta * (G_t(x, u) - F_t(x)))`
//!
//! and the policy at each step is Gaussian with a state-affine mean.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::linalg::{self, cholesky, is_negative_definite, symmetrize};
use crate::types::{Covariance, MarketModel, RewardParams};

/// `F(x) = x^T pxx x + px^T x + p0`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticValue {
    pub pxx: DMatrix<f64>,
    pub px: DVector<f64>,
    pub p0: f64,
}

impl QuadraticValue {
    pub fn zeros(n: usize) -> Self {
        Self {
            pxx: DMatrix::zeros(n, n),
            px: DVector::zeros(n),
            p0: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.px.len()
    }

    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        x.dot(&(&self.pxx * x)) + self.px.dot(x) + self.p0
    }
}

/// `G(x, u) = u^T quu u + u^T qux x + x^T qxx x + qu^T u + qx^T x + q0`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticQ {
    pub quu: DMatrix<f64>,
    pub qux: DMatrix<f64>,
    pub qxx: DMatrix<f64>,
    pub qu: DVector<f64>,
    pub qx: DVector<f64>,
    pub q0: f64,
}

impl QuadraticQ {
    pub fn zeros(n: usize) -> Self {
        Self {
            quu: DMatrix::zeros(n, n),
            qux: DMatrix::zeros(n, n),
            qxx: DMatrix::zeros(n, n),
            qu: DVector::zeros(n),
            qx: DVector::zeros(n),
            q0: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.qu.len()
    }

    pub fn eval(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        u.dot(&(&self.quu * u))
            + u.dot(&(&self.qux * x))
            + x.dot(&(&self.qxx * x))
            + self.qu.dot(u)
            + self.qx.dot(x)
            + self.q0
    }

    /// The `u`-independent part, `x^T qxx x + qx^T x + q0`.
    pub fn state_part(&self) -> QuadraticValue {
        QuadraticValue {
            pxx: self.qxx.clone(),
            px: self.qx.clone(),
            p0: self.q0,
        }
    }

    fn symmetrized(mut self) -> Self {
        self.quu = symmetrize(&self.quu);
        self.qxx = symmetrize(&self.qxx);
        self
    }

    fn add_scaled(&self, other: &QuadraticQ, scale: f64) -> QuadraticQ {
        QuadraticQ {
            quu: &self.quu + &other.quu * scale,
            qux: &self.qux + &other.qux * scale,
            qxx: &self.qxx + &other.qxx * scale,
            qu: &self.qu + &other.qu * scale,
            qx: &self.qx + &other.qx * scale,
            q0: self.q0 + other.q0 * scale,
        }
        .symmetrized()
    }

    pub fn is_concave_in_action(&self) -> bool {
        is_negative_definite(&self.quu)
    }

    /// Maximizer of `G(x, .)`: `u* = -(2 quu)^{-1} (qux x + qu)`.
    pub fn argmax_action(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let neg = cholesky(&(-&self.quu), "negated action curvature")?;
        Ok(neg.solve(&(&self.qux * x + &self.qu)) * 0.5)
    }
}

/// State-independent Gaussian prior over trades.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorPolicy {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl PriorPolicy {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        linalg::check_square(&cov, mean.len(), "prior covariance")?;
        cholesky(&cov, "prior covariance")?;
        Ok(Self { mean, cov })
    }

    pub fn diagonal(mean: DVector<f64>, variances: DVector<f64>) -> Result<Self> {
        ensure_len("prior variances", variances.len(), mean.len())?;
        if variances.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidParameter(
                "prior variances must be finite and positive".into(),
            ));
        }
        Ok(Self {
            mean,
            cov: DMatrix::from_diagonal(&variances),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GlearnerConfig {
    /// KL temperature; `None` means calibrate to `target_kl`.
    pub beta: Option<f64>,
    pub gamma: f64,
    pub max_outer_iters: usize,
    pub outer_tol: f64,
    /// First-step KL(policy || prior) in nats used for calibration.
    pub target_kl: f64,
}

impl Default for GlearnerConfig {
    fn default() -> Self {
        Self {
            beta: None,
            gamma: 1.0,
            max_outer_iters: 1,
            outer_tol: 1e-8,
            target_kl: 1.0,
        }
    }
}

impl GlearnerConfig {
    pub fn with_beta(beta: f64) -> Self {
        Self {
            beta: Some(beta),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(b) = self.beta {
            check_beta(b)?;
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "gamma must lie in (0, 1], got {}",
                self.gamma
            )));
        }
        if self.max_outer_iters == 0 {
            return Err(Error::InvalidParameter("max_outer_iters must be >= 1".into()));
        }
        if !(self.target_kl > 0.0) {
            return Err(Error::InvalidParameter("target_kl must be positive".into()));
        }
        Ok(())
    }

    fn resolved_beta(&self) -> Result<f64> {
        self.beta
            .ok_or_else(|| Error::Config("beta is unset; calibrate it before solving".into()))
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "beta must be positive and finite, got {beta}"
        )));
    }
    Ok(())
}

/// One step of a Gaussian policy: `u ~ N(intercept + gain x, cov)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyStep {
    pub intercept: DVector<f64>,
    pub gain: DMatrix<f64>,
    pub cov: DMatrix<f64>,
}

impl PolicyStep {
    pub fn new(intercept: DVector<f64>, gain: DMatrix<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let n = intercept.len();
        if gain.nrows() != n || gain.ncols() != n {
            return Err(Error::Dimension(format!(
                "policy gain is {}x{}, expected {n}x{n}",
                gain.nrows(),
                gain.ncols()
            )));
        }
        linalg::check_square(&cov, n, "policy covariance")?;
        cholesky(&cov, "policy covariance")?;
        Ok(Self { intercept, gain, cov })
    }

    pub fn dim(&self) -> usize {
        self.intercept.len()
    }

    pub fn mean(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.intercept + &self.gain * x
    }

    pub fn log_density(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<f64> {
        let chol = cholesky(&self.cov, "policy covariance")?;
        let d = u - self.mean(x);
        let n = d.len() as f64;
        Ok(-0.5 * (d.dot(&chol.solve(&d)) + linalg::log_det_spd(&chol) + n * (2.0 * std::f64::consts::PI).ln()))
    }

    pub fn kl_to_prior(&self, x: &DVector<f64>, prior: &PriorPolicy) -> Result<f64> {
        linalg::kl_gaussian(&self.mean(x), &self.cov, &prior.mean, &prior.cov)
    }
}

/// Time-indexed Gaussian policy, steps `t = 0..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicy {
    pub beta: f64,
    pub steps: Vec<PolicyStep>,
}

impl GaussianPolicy {
    pub fn horizon(&self) -> usize {
        self.steps.len().saturating_sub(1)
    }

    pub fn n_sectors(&self) -> usize {
        self.steps.first().map_or(0, PolicyStep::dim)
    }

    fn max_abs_change(&self, other: &GaussianPolicy) -> f64 {
        self.steps
            .iter()
            .zip(&other.steps)
            .map(|(a, b)| {
                (&a.intercept - &b.intercept)
                    .amax()
                    .max((&a.gain - &b.gain).amax())
                    .max((&a.cov - &b.cov).amax())
            })
            .fold(0.0, f64::max)
    }
}

/// Mode of the step policy at state `x`.
pub fn recommend(step: &PolicyStep, x: &DVector<f64>) -> DVector<f64> {
    step.mean(x)
}

/// Exact quadratic coefficients of the expected reward in `(x, u)`.
pub fn reward_coefficients(
    params: &RewardParams,
    r_bar: &DVector<f64>,
    sigma: &Covariance,
    benchmark: f64,
    cashflow: f64,
) -> Result<QuadraticQ> {
    params.validate()?;
    let n = r_bar.len();
    ensure_len("covariance", sigma.dim(), n)?;
    let s = sigma.matrix();
    let growth = r_bar.map(|r| 1.0 + r);
    let ones = linalg::ones(n);
    let k = (1.0 - params.rho) * params.eta;
    let c = params.rho * benchmark;
    // target - growth^T z = c + w^T x - growth^T u
    let w = &ones * k - &growth;

    let aa = &growth * growth.transpose();
    let quu = -(aa + s + &ones * ones.transpose() * params.lam + DMatrix::identity(n, n) * params.omega);
    let qux = &growth * w.transpose() * 2.0 - s * 2.0;
    let qxx = -(&w * w.transpose() + s);
    let qu = &growth * (2.0 * c) + &ones * (2.0 * params.lam * cashflow);
    let qx = &w * (-2.0 * c);
    let q0 = -c * c - params.lam * cashflow * cashflow;
    Ok(QuadraticQ {
        quu,
        qux,
        qxx,
        qu,
        qx,
        q0,
    }
    .symmetrized())
}

/// `E[F(diag(1 + r)(x + u))]` as a quadratic form in `(x, u)`.
pub fn expected_next_value(f_next: &QuadraticValue, r_bar: &DVector<f64>, sigma: &Covariance) -> Result<QuadraticQ> {
    let n = f_next.dim();
    ensure_len("expected returns", r_bar.len(), n)?;
    ensure_len("covariance", sigma.dim(), n)?;
    let growth = r_bar.map(|r| 1.0 + r);
    let second_moment = &growth * growth.transpose() + sigma.matrix();
    let m = symmetrize(&f_next.pxx.component_mul(&second_moment));
    let lin = f_next.px.component_mul(&growth);
    Ok(QuadraticQ {
        qux: &m * 2.0,
        qxx: m.clone(),
        quu: m,
        qu: lin.clone(),
        qx: lin,
        q0: f_next.p0,
    })
}

pub fn action_value_update(
    f_next: &QuadraticValue,
    reward: &QuadraticQ,
    gamma: f64,
    r_bar: &DVector<f64>,
    sigma: &Covariance,
) -> Result<QuadraticQ> {
    if reward.dim() != f_next.dim() {
        return Err(Error::Dimension(format!(
            "reward has {} sectors, next value {}",
            reward.dim(),
            f_next.dim()
        )));
    }
    let g = reward.add_scaled(&expected_next_value(f_next, r_bar, sigma)?, gamma);
    if !g.is_concave_in_action() {
        return Err(Error::Numerical(
            "degenerate action-value curvature: quu is not negative definite".into(),
        ));
    }
    Ok(g)
}

/// Prior-side pieces shared by the value and policy updates.
struct Tilted {
    /// Policy covariance, the inverse of `prior_cov^{-1} - 2 beta quu`.
    cov: DMatrix<f64>,
    /// Policy mean at `x = 0`.
    intercept: DVector<f64>,
    gain: DMatrix<f64>,
    /// `log det(I - 2 beta L^T quu L)` with `prior_cov = L L^T`.
    log_det_ratio: f64,
}

fn tilt(g: &QuadraticQ, prior: &PriorPolicy, beta: f64) -> Result<Tilted> {
    check_beta(beta)?;
    let n = g.dim();
    ensure_len("prior mean", prior.dim(), n)?;
    let prior_chol = cholesky(&prior.cov, "prior covariance")?;
    let prior_prec = prior_chol.inverse();
    let precision = symmetrize(&(&prior_prec - &g.quu * (2.0 * beta)));
    let chol = cholesky(&precision, "policy precision").map_err(|_| {
        Error::Numerical("beta too large for prior covariance: policy precision is not positive definite".into())
    })?;
    let cov = symmetrize(&chol.inverse());
    let d = &prior_prec * &prior.mean + &g.qu * beta;
    let intercept = chol.solve(&d);
    let gain = chol.solve(&g.qux) * beta;

    let l = prior_chol.l();
    let k = symmetrize(&(l.transpose() * &g.quu * &l * (-2.0 * beta)));
    let eig = SymmetricEigen::new(k).eigenvalues;
    if eig.iter().any(|e| *e <= -1.0) {
        return Err(Error::Numerical(
            "beta too large for prior covariance: policy precision is not positive definite".into(),
        ));
    }
    let log_det_ratio = eig.iter().map(|e| e.ln_1p()).sum();
    Ok(Tilted {
        cov,
        intercept,
        gain,
        log_det_ratio,
    })
}

/// Soft value `F(x) = (1/beta) log E_prior[exp(beta G(x, u))]` in closed form.
///
/// The constant is assembled from the tilted mean `nu` rather than from
/// `d^T Lambda^{-1} d - mu^T Sigma0^{-1} mu`, which cancels catastrophically
/// as `beta -> 0`.
pub fn value_update(g: &QuadraticQ, prior: &PriorPolicy, beta: f64) -> Result<QuadraticValue> {
    let tilted = tilt(g, prior, beta)?;
    let nu = &tilted.intercept;
    let qux_t = g.qux.transpose();
    let pxx = symmetrize(&(&g.qxx + &qux_t * &tilted.gain * 0.5));
    let px = &g.qx + &qux_t * nu;
    let p0 = g.q0 + prior.mean.dot(&(&g.quu * nu)) + 0.5 * g.qu.dot(&(&prior.mean + nu))
        - tilted.log_det_ratio / (2.0 * beta);
    Ok(QuadraticValue { pxx, px, p0 })
}

/// Terminal step: `G_T = R_T` and `F_T(x) = max_u G_T(x, u)`.
pub fn terminal_init(reward: &QuadraticQ) -> Result<(QuadraticQ, QuadraticValue)> {
    let neg = cholesky(&(-&reward.quu), "negated terminal action curvature")
        .map_err(|_| Error::Numerical("singular terminal curvature: quu is not negative definite".into()))?;
    let sol_ux = neg.solve(&reward.qux);
    let sol_u = neg.solve(&reward.qu);
    let qux_t = reward.qux.transpose();
    let value = QuadraticValue {
        pxx: symmetrize(&(&reward.qxx + &qux_t * &sol_ux * 0.25)),
        px: &reward.qx + &qux_t * &sol_u * 0.5,
        p0: reward.q0 + 0.25 * reward.qu.dot(&sol_u),
    };
    Ok((reward.clone(), value))
}

/// Gaussian policy `prior(u) exp(beta (G(x, u) - F(x)))`.
pub fn extract_policy(g: &QuadraticQ, prior: &PriorPolicy, beta: f64) -> Result<PolicyStep> {
    let t = tilt(g, prior, beta)?;
    Ok(PolicyStep {
        intercept: t.intercept,
        gain: t.gain,
        cov: t.cov,
    })
}

#[derive(Debug, Clone)]
pub struct GlearnerSolution {
    pub policy: GaussianPolicy,
    /// `F_t`, `t = 0..=T`.
    pub values: Vec<QuadraticValue>,
    /// `G_t`, `t = 0..=T`.
    pub action_values: Vec<QuadraticQ>,
    pub sweeps: usize,
}

/// Backward recursion over the horizon of `market`.
pub fn solve(
    market: &MarketModel,
    params: &RewardParams,
    prior: &PriorPolicy,
    benchmark: &DVector<f64>,
    cashflow: &DVector<f64>,
    cfg: &GlearnerConfig,
) -> Result<GlearnerSolution> {
    cfg.validate()?;
    let beta = cfg.resolved_beta()?;
    let horizon = market.horizon();
    let n = market.n_sectors();
    ensure_len("benchmark path", benchmark.len(), horizon + 1)?;
    ensure_len("cashflow path", cashflow.len(), horizon + 1)?;
    ensure_len("prior", prior.dim(), n)?;

    let sigma = &market.covariance;
    let rewards = (0..=horizon)
        .map(|t| {
            reward_coefficients(params, &market.mean_at(t), sigma, benchmark[t], cashflow[t]).map_err(Error::at_step(t))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut previous: Option<GaussianPolicy> = None;
    let mut sweeps = 0;
    loop {
        sweeps += 1;
        let (g_last, f_last) = terminal_init(&rewards[horizon]).map_err(Error::at_step(horizon))?;
        let mut values = vec![QuadraticValue::zeros(n); horizon + 1];
        let mut action_values = vec![QuadraticQ::zeros(n); horizon + 1];
        let mut steps = Vec::with_capacity(horizon + 1);
        steps.push(extract_policy(&g_last, prior, beta).map_err(Error::at_step(horizon))?);
        values[horizon] = f_last;
        action_values[horizon] = g_last;
        for t in (0..horizon).rev() {
            let step = || -> Result<(QuadraticQ, QuadraticValue, PolicyStep)> {
                let g = action_value_update(&values[t + 1], &rewards[t], cfg.gamma, &market.mean_at(t), sigma)?;
                let f = value_update(&g, prior, beta)?;
                let p = extract_policy(&g, prior, beta)?;
                Ok((g, f, p))
            };
            let (g, f, p) = step().map_err(Error::at_step(t))?;
            values[t] = f;
            action_values[t] = g;
            steps.push(p);
        }
        steps.reverse();
        let policy = GaussianPolicy { beta, steps };
        let converged = previous
            .as_ref()
            .is_some_and(|prev| prev.max_abs_change(&policy) < cfg.outer_tol);
        if converged || sweeps >= cfg.max_outer_iters {
            return Ok(GlearnerSolution {
                policy,
                values,
                action_values,
                sweeps,
            });
        }
        previous = Some(policy);
    }
}

/// Mean first-step KL(policy || prior) over the given states.
pub fn first_step_kl(policy: &GaussianPolicy, prior: &PriorPolicy, states: &[DVector<f64>]) -> Result<f64> {
    let step = policy.steps.first().ok_or_else(|| Error::Data("empty policy".into()))?;
    let total = states.iter().map(|x| step.kl_to_prior(x, prior)).sum::<Result<f64>>()?;
    Ok(total / states.len().max(1) as f64)
}

/// Bisection in `log10(beta)` over `[1e-8, 1e8]` for the temperature whose
/// first-step KL to the prior, averaged over `states`, equals `cfg.target_kl`.
pub fn calibrate_beta(
    market: &MarketModel,
    params: &RewardParams,
    prior: &PriorPolicy,
    benchmark: &DVector<f64>,
    cashflow: &DVector<f64>,
    cfg: &GlearnerConfig,
    states: &[DVector<f64>],
) -> Result<f64> {
    if states.is_empty() {
        return Err(Error::Data("beta calibration needs at least one state".into()));
    }
    let kl_at = |log_beta: f64| -> Result<f64> {
        let c = GlearnerConfig {
            beta: Some(10f64.powf(log_beta)),
            max_outer_iters: 1,
            ..*cfg
        };
        let sol = solve(market, params, prior, benchmark, cashflow, &c)?;
        first_step_kl(&sol.policy, prior, states)
    };
    let (mut lo, mut hi) = (-8.0_f64, 8.0_f64);
    if kl_at(hi)? <= cfg.target_kl {
        return Ok(10f64.powf(hi));
    }
    if kl_at(lo)? >= cfg.target_kl {
        return Ok(10f64.powf(lo));
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if kl_at(mid)? < cfg.target_kl {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(10f64.powf(0.5 * (lo + hi)))
}
