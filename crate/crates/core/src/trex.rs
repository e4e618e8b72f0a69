//! Parametric trajectory-ranked reward extrapolation.
//!
//! Fits the four reward parameters so that cumulative rewards of the
//! demonstrations order them the same way as their ranking scores, using a
//! Bradley-Terry style pairwise cross-entropy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reward::RewardTerms;
use crate::types::{FundTrajectory, MarketModel, RankedDemoSet, RewardParams};

/// Score differences below this are ties.
pub const TIE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrexConfig {
    pub max_iters: usize,
    pub learning_rate: f64,
    /// Step size multiplier after an accepted step; 1 keeps the step fixed
    /// until a rejection halves it.
    pub lr_growth: f64,
    /// Temperature multiplying cumulative rewards inside the softmax.
    /// `None` selects the reciprocal of the standard deviation of the
    /// demonstrations' cumulative rewards at `init_params`.
    pub reward_scale: Option<f64>,
    pub init_params: RewardParams,
    /// Stop once an accepted step lowers the loss by less than this.
    pub convergence_tol: f64,
    /// Drop pairs with tied scores instead of failing.
    pub drop_ties: bool,
}

impl Default for TrexConfig {
    fn default() -> Self {
        Self {
            max_iters: 200,
            learning_rate: 0.05,
            lr_growth: 1.0,
            reward_scale: None,
            init_params: RewardParams::default(),
            convergence_tol: 1e-6,
            drop_ties: true,
        }
    }
}

impl TrexConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.lr_growth >= 1.0 && self.lr_growth.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "lr_growth must be >= 1, got {}",
                self.lr_growth
            )));
        }
        if let Some(s) = self.reward_scale {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "reward_scale must be positive, got {s}"
                )));
            }
        }
        if !(self.convergence_tol >= 0.0) {
            return Err(Error::InvalidParameter("convergence_tol must be >= 0".into()));
        }
        self.init_params.validate()
    }

    /// The configured scale, or the automatic one for these demonstrations.
    pub fn scale_for(&self, demos: &RankedDemoSet, market: &MarketModel) -> Result<f64> {
        match self.reward_scale {
            Some(s) => Ok(s),
            None => auto_reward_scale(demos, &self.init_params, market),
        }
    }
}

/// `1 / sd` of cumulative rewards across trajectories, so initial pair
/// margins are of order one whatever the portfolio units. Falls back to
/// `1 / T` when all rewards coincide.
pub fn auto_reward_scale(demos: &RankedDemoSet, params: &RewardParams, market: &MarketModel) -> Result<f64> {
    let rewards = demos
        .trajectories
        .iter()
        .map(|t| cumulative_reward(t, params, market))
        .collect::<Result<Vec<_>>>()?;
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let sd = (rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n).sqrt();
    if sd > 0.0 && sd.is_finite() {
        Ok(1.0 / sd)
    } else {
        Ok(1.0 / demos.horizon().max(1) as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub params: RewardParams,
    /// Loss after every accepted step, starting with the initial loss.
    pub loss_history: Vec<f64>,
    pub param_history: Vec<RewardParams>,
    /// Gradient steps attempted, including rejected ones.
    pub iterations: usize,
    pub converged: bool,
    pub reward_scale: f64,
}

impl FitResult {
    pub fn final_loss(&self) -> f64 {
        *self.loss_history.last().expect("loss history is never empty")
    }
}

/// Unconstrained coordinates `(logit rho, ln eta, softplus^-1 lam,
/// softplus^-1 omega)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coords(pub [f64; 4]);

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

fn softplus_inv(y: f64) -> f64 {
    let y = y.max(1e-12);
    if y > 30.0 {
        y + (-(-y).exp_m1()).ln()
    } else {
        y.exp_m1().ln()
    }
}

impl Coords {
    pub fn from_params(p: &RewardParams) -> Self {
        let rho = p.rho.clamp(1e-12, 1.0 - 1e-12);
        Coords([
            (rho / (1.0 - rho)).ln(),
            p.eta.ln(),
            softplus_inv(p.lam),
            softplus_inv(p.omega),
        ])
    }

    pub fn to_params(self) -> RewardParams {
        let [a, b, c, d] = self.0;
        RewardParams {
            rho: sigmoid(a),
            eta: b.exp(),
            lam: softplus(c),
            omega: softplus(d),
        }
    }

    /// `d param / d coord`, elementwise.
    fn jacobian(self) -> [f64; 4] {
        let [a, b, c, d] = self.0;
        let s = sigmoid(a);
        [s * (1.0 - s), b.exp(), sigmoid(c), sigmoid(d)]
    }
}

fn check_market(traj: &FundTrajectory, market: &MarketModel) -> Result<()> {
    if traj.n_sectors() != market.n_sectors() || traj.horizon() != market.horizon() {
        return Err(Error::Dimension(format!(
            "fund {} is horizon {} x {} sectors, market model is {} x {}",
            traj.fund_id,
            traj.horizon(),
            traj.n_sectors(),
            market.horizon(),
            market.n_sectors()
        )));
    }
    Ok(())
}

fn cumulative_with_grad(traj: &FundTrajectory, params: &RewardParams, market: &MarketModel) -> Result<(f64, [f64; 4])> {
    traj.require_normalized()?;
    check_market(traj, market)?;
    let mut total = 0.0;
    let mut grad = [0.0; 4];
    for t in 0..=traj.horizon() {
        let terms = RewardTerms::compute(
            &traj.state(t),
            &traj.trade(t),
            params,
            &market.mean_at(t),
            &market.covariance,
            traj.benchmark[t],
            traj.cashflow[t],
        )?;
        total += terms.reward(params);
        for (g, d) in grad.iter_mut().zip(terms.param_gradient(params, traj.benchmark[t])) {
            *g += d;
        }
    }
    Ok((total, grad))
}

/// Sum of expected one-step rewards over `t = 0..=T`.
pub fn cumulative_reward(traj: &FundTrajectory, params: &RewardParams, market: &MarketModel) -> Result<f64> {
    Ok(cumulative_with_grad(traj, params, market)?.0)
}

/// Ordered pairs `(worse, better)` by score.
pub fn ranked_pairs(demos: &RankedDemoSet, drop_ties: bool) -> Result<Vec<(usize, usize)>> {
    if demos.len() < 2 {
        return Err(Error::Data(format!(
            "ranking needs at least 2 trajectories, got {}",
            demos.len()
        )));
    }
    let mut pairs = Vec::new();
    for (a, &i) in demos.order.iter().enumerate() {
        for &j in &demos.order[a + 1..] {
            if demos.scores[j] - demos.scores[i] < TIE_TOL {
                if !drop_ties {
                    return Err(Error::Data(format!(
                        "funds {} and {} have tied scores",
                        demos.trajectories[i].fund_id, demos.trajectories[j].fund_id
                    )));
                }
                continue;
            }
            pairs.push((i, j));
        }
    }
    if pairs.is_empty() {
        return Err(Error::Data("all ranking scores are tied".into()));
    }
    Ok(pairs)
}

/// Loss and gradient in reparameterized coordinates.
fn loss_and_grad(
    demos: &RankedDemoSet,
    pairs: &[(usize, usize)],
    coords: Coords,
    market: &MarketModel,
    scale: f64,
) -> Result<(f64, [f64; 4])> {
    let params = coords.to_params();
    let evals = demos
        .trajectories
        .iter()
        .map(|t| cumulative_with_grad(t, &params, market))
        .collect::<Result<Vec<_>>>()?;
    let mut loss = 0.0;
    let mut grad = [0.0; 4];
    for &(i, j) in pairs {
        let margin = scale * (evals[i].0 - evals[j].0);
        // -log(e^{s_j} / (e^{s_i} + e^{s_j})) = softplus(s_i - s_j)
        loss += softplus(margin);
        let w = sigmoid(margin) * scale;
        for k in 0..4 {
            grad[k] += w * (evals[i].1[k] - evals[j].1[k]);
        }
    }
    let m = pairs.len() as f64;
    let jac = coords.jacobian();
    for k in 0..4 {
        grad[k] *= jac[k] / m;
    }
    Ok((loss / m, grad))
}

/// Mean pairwise ranking cross-entropy over all non-tied ordered pairs.
pub fn pairwise_loss(demos: &RankedDemoSet, params: &RewardParams, market: &MarketModel, scale: f64) -> Result<f64> {
    let pairs = ranked_pairs(demos, true)?;
    Ok(loss_and_grad(demos, &pairs, Coords::from_params(params), market, scale)?.0)
}

/// Gradient of [`pairwise_loss`] with respect to the unconstrained coordinates.
pub fn pairwise_loss_gradient(
    demos: &RankedDemoSet,
    coords: Coords,
    market: &MarketModel,
    scale: f64,
) -> Result<(f64, [f64; 4])> {
    let pairs = ranked_pairs(demos, true)?;
    loss_and_grad(demos, &pairs, coords, market, scale)
}

/// Gradient descent in unconstrained coordinates, halving the step whenever
/// a trial step would raise the loss.
pub fn fit_reward(demos: &RankedDemoSet, market: &MarketModel, cfg: &TrexConfig) -> Result<FitResult> {
    cfg.validate()?;
    let pairs = ranked_pairs(demos, cfg.drop_ties)?;
    let scale = cfg.scale_for(demos, market)?;
    let mut coords = Coords::from_params(&cfg.init_params);
    let (mut loss, mut grad) = loss_and_grad(demos, &pairs, coords, market, scale)?;
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numerical(format!(
            "initial ranking loss is {loss}; reward_scale {scale} is likely too large"
        )));
    }
    let mut lr = cfg.learning_rate;
    let mut loss_history = vec![loss];
    let mut param_history = vec![coords.to_params()];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        iterations += 1;
        let mut trial = coords.0;
        for k in 0..4 {
            trial[k] -= lr * grad[k];
        }
        let trial = Coords(trial);
        let accepted = match loss_and_grad(demos, &pairs, trial, market, scale) {
            Ok((l, g)) if l.is_finite() && l <= loss && g.iter().all(|v| v.is_finite()) => Some((l, g)),
            Ok(_) => None,
            Err(e @ Error::Dimension(_)) => return Err(e),
            Err(_) => None,
        };
        match accepted {
            Some((l, g)) => {
                let improvement = loss - l;
                coords = trial;
                loss = l;
                grad = g;
                loss_history.push(loss);
                param_history.push(coords.to_params());
                lr *= cfg.lr_growth;
                if improvement < cfg.convergence_tol {
                    converged = true;
                    break;
                }
            }
            None => {
                lr *= 0.5;
                if lr < 1e-14 {
                    converged = true;
                    break;
                }
            }
        }
    }
    Ok(FitResult {
        params: coords.to_params(),
        loss_history,
        param_history,
        iterations,
        converged,
        reward_scale: scale,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankingMetrics {
    pub accuracy: f64,
    pub pearson: f64,
    pub spearman: f64,
}

/// Pair classification accuracy and score/reward correlations.
pub fn ranking_metrics(demos: &RankedDemoSet, params: &RewardParams, market: &MarketModel) -> Result<RankingMetrics> {
    let rewards = demos
        .trajectories
        .iter()
        .map(|t| cumulative_reward(t, params, market))
        .collect::<Result<Vec<_>>>()?;
    metrics_from_rewards(demos, &rewards)
}

/// Metrics for externally supplied per-trajectory cumulative rewards.
pub fn metrics_from_rewards(demos: &RankedDemoSet, rewards: &[f64]) -> Result<RankingMetrics> {
    crate::error::ensure_len("rewards", rewards.len(), demos.len())?;
    let pairs = ranked_pairs(demos, true)?;
    let correct = pairs.iter().filter(|&&(i, j)| rewards[j] > rewards[i]).count();
    Ok(RankingMetrics {
        accuracy: correct as f64 / pairs.len() as f64,
        pearson: pearson(&demos.scores, rewards),
        spearman: pearson(&average_ranks(&demos.scores), &average_ranks(rewards)),
    })
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

/// 1-based ranks, ties sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[idx[k]] = avg;
        }
        i = j + 1;
    }
    ranks
}
