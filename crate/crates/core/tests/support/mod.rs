//! Random instances and Monte Carlo estimators shared by the integration
//! and acceptance tests.
#![allow(dead_code)]

use alterego::glearner::{PolicyStep, PriorPolicy, QuadraticQ};
use alterego::reward::propagate_state;
use alterego::types::{Covariance, FundTrajectory, MarketModel, RankedDemoSet, RewardParams, YearMonth};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normals(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

pub fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| rng.random_range(lo..hi)))
}

/// `A A^T / n * scale + jitter * I` with Gaussian `A`.
pub fn random_spd(rng: &mut ChaCha8Rng, n: usize, scale: f64, jitter: f64) -> DMatrix<f64> {
    let a = DMatrix::from_iterator(n, n, (0..n * n).map(|_| rng.sample::<f64, _>(StandardNormal)));
    let m = &a * a.transpose() * (scale / n as f64) + DMatrix::identity(n, n) * jitter;
    (&m + m.transpose()) * 0.5
}

pub fn random_params(rng: &mut ChaCha8Rng) -> RewardParams {
    RewardParams::new(
        rng.random_range(0.05..0.95),
        rng.random_range(0.8..1.6),
        rng.random_range(0.01..0.5),
        rng.random_range(0.01..0.5),
    )
    .unwrap()
}

pub fn random_market(rng: &mut ChaCha8Rng, n: usize, horizon: usize) -> MarketModel {
    let mean = DMatrix::from_iterator(
        horizon + 1,
        n,
        (0..(horizon + 1) * n).map(|_| rng.random_range(-0.02..0.03)),
    );
    let cov = Covariance::new(random_spd(rng, n, 0.002, 1e-4)).unwrap();
    MarketModel::new(mean, cov).unwrap()
}

pub fn random_prior(rng: &mut ChaCha8Rng, n: usize) -> PriorPolicy {
    PriorPolicy::new(uniform_vec(rng, n, -0.02, 0.02), random_spd(rng, n, 0.002, 2e-4)).unwrap()
}

/// A normalized trajectory that follows its own trades and random returns.
pub fn random_trajectory(rng: &mut ChaCha8Rng, id: &str, n: usize, horizon: usize) -> FundTrajectory {
    let raw = uniform_vec(rng, n, 0.2, 1.0);
    let mut x = &raw / raw.sum();
    let mut holdings = DMatrix::zeros(horizon + 1, n);
    let mut trades = DMatrix::zeros(horizon + 1, n);
    let mut benchmark = DVector::zeros(horizon + 1);
    let mut cashflow = DVector::zeros(horizon + 1);
    benchmark[0] = 1.0;
    for t in 0..=horizon {
        let u = normals(rng, n) * 0.02;
        holdings.set_row(t, &x.transpose());
        trades.set_row(t, &u.transpose());
        cashflow[t] = rng.random_range(-0.01..0.01);
        if t < horizon {
            let r = uniform_vec(rng, n, -0.05, 0.07);
            benchmark[t + 1] = benchmark[t] * (1.0 + r.mean());
            x = propagate_state(&x, &u, &r).unwrap().map(|v| v.max(0.01));
        }
    }
    let dates = YearMonth::new(2020, 1).unwrap().series(horizon + 1);
    FundTrajectory::new(id, dates, holdings, trades, benchmark, cashflow, true).unwrap()
}

pub fn random_demos(rng: &mut ChaCha8Rng, funds: usize, n: usize, horizon: usize) -> RankedDemoSet {
    let trajs = (0..funds)
        .map(|i| random_trajectory(rng, &format!("F{i}"), n, horizon))
        .collect();
    RankedDemoSet::from_returns(trajs).unwrap()
}

/// Sample mean and standard error.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// Draws from `N(mean, cov)` through a fixed Cholesky factor.
pub struct Gaussian {
    pub mean: DVector<f64>,
    pub chol: DMatrix<f64>,
}

impl Gaussian {
    pub fn new(mean: DVector<f64>, cov: &DMatrix<f64>) -> Self {
        let chol = cov.clone().cholesky().expect("positive definite").l();
        Self { mean, chol }
    }

    /// Allows a PSD covariance with zero eigenvalues.
    pub fn psd(mean: DVector<f64>, cov: &DMatrix<f64>) -> Self {
        let eig = cov.clone().symmetric_eigen();
        let root = &eig.eigenvectors * DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
        Self { mean, chol: root }
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> DVector<f64> {
        &self.mean + &self.chol * normals(rng, self.mean.len())
    }
}

/// Realized one-step reward for sector returns `r`.
pub fn realized_reward(
    x: &DVector<f64>,
    u: &DVector<f64>,
    r: &DVector<f64>,
    params: &RewardParams,
    benchmark: f64,
    cashflow: f64,
) -> f64 {
    let target = params.rho * benchmark + (1.0 - params.rho) * params.eta * x.sum();
    let value: f64 = (x + u).iter().zip(r.iter()).map(|(z, ri)| z * (1.0 + ri)).sum();
    let flow_gap = u.sum() - cashflow;
    -(target - value).powi(2) - params.lam * flow_gap * flow_gap - params.omega * u.norm_squared()
}

/// Monte Carlo `(1/beta) log E_prior[exp(beta G(x, u))]`, with the
/// log-mean-exp taken around the sample maximum.
pub fn mc_free_energy(
    g: &QuadraticQ,
    prior: &PriorPolicy,
    beta: f64,
    x: &DVector<f64>,
    samples: usize,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let dist = Gaussian::new(prior.mean.clone(), &prior.cov);
    let vals: Vec<f64> = (0..samples).map(|_| beta * g.eval(x, &dist.sample(rng))).collect();
    let top = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = vals.iter().map(|v| (v - top).exp()).sum::<f64>() / samples as f64;
    (top + mean.ln()) / beta
}

/// Trade rule for Monte Carlo rollouts.
pub enum Rule<'a> {
    /// Time-indexed Gaussian steps.
    Steps(&'a [PolicyStep]),
    /// The same state-independent Gaussian at every step.
    Stationary(Gaussian),
}

/// Mean and standard error of the total realized reward over `rollouts`
/// paths from `x0`, with returns drawn from `market`.
#[allow(clippy::too_many_arguments)]
pub fn mc_policy_value(
    rule: &Rule,
    x0: &DVector<f64>,
    market: &MarketModel,
    params: &RewardParams,
    benchmark: &DVector<f64>,
    cashflow: &DVector<f64>,
    rollouts: usize,
    rng: &mut ChaCha8Rng,
) -> (f64, f64) {
    let horizon = market.horizon();
    let returns: Vec<Gaussian> = (0..=horizon)
        .map(|t| Gaussian::psd(market.mean_at(t), market.covariance.matrix()))
        .collect();
    let steps: Vec<Option<Gaussian>> = match rule {
        Rule::Steps(s) => s
            .iter()
            .map(|st| Some(Gaussian::new(DVector::zeros(st.dim()), &st.cov)))
            .collect(),
        Rule::Stationary(_) => (0..=horizon).map(|_| None).collect(),
    };
    let totals: Vec<f64> = (0..rollouts)
        .map(|_| {
            let mut x = x0.clone();
            let mut total = 0.0;
            for t in 0..=horizon {
                let u = match (rule, &steps[t]) {
                    (Rule::Steps(s), Some(noise)) => s[t].mean(&x) + noise.sample(rng),
                    (Rule::Stationary(d), _) => d.sample(rng),
                    _ => unreachable!(),
                };
                let r = returns[t].sample(rng);
                total += realized_reward(&x, &u, &r, params, benchmark[t], cashflow[t]);
                x = propagate_state(&x, &u, &r).unwrap();
            }
            total
        })
        .collect();
    mean_se(&totals)
}

fn gaussian_log_density(u: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let chol = cov.clone().cholesky().expect("positive definite");
    let d = u - mean;
    let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    -0.5 * (d.dot(&chol.solve(&d)) + logdet + d.len() as f64 * (2.0 * std::f64::consts::PI).ln())
}

/// Same quantity as [`mc_free_energy`], estimated by importance sampling
/// from a Gaussian fitted to a weighted pilot sample from the prior and
/// widened by `2x` in covariance. Unbiased inside the log for any proposal;
/// the pilot only reduces variance when the tilted density is narrow.
pub fn mc_free_energy_adaptive(
    g: &QuadraticQ,
    prior: &PriorPolicy,
    beta: f64,
    x: &DVector<f64>,
    pilot: usize,
    samples: usize,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let n = prior.dim();
    let dist = Gaussian::new(prior.mean.clone(), &prior.cov);
    let draws: Vec<DVector<f64>> = (0..pilot).map(|_| dist.sample(rng)).collect();
    let logw: Vec<f64> = draws.iter().map(|u| beta * g.eval(x, u)).collect();
    let top = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logw.iter().map(|l| (l - top).exp()).collect();
    let total: f64 = w.iter().sum();
    let mean = draws
        .iter()
        .zip(&w)
        .fold(DVector::zeros(n), |acc, (u, wi)| acc + u * (*wi / total));
    let mut cov = DMatrix::zeros(n, n);
    for (u, wi) in draws.iter().zip(&w) {
        let d = u - &mean;
        cov += &d * d.transpose() * (*wi / total);
    }
    let cov = cov * 2.0 + &prior.cov * 1e-3;
    let proposal = Gaussian::new(mean.clone(), &cov);
    let terms: Vec<f64> = (0..samples)
        .map(|_| {
            let u = proposal.sample(rng);
            beta * g.eval(x, &u) + gaussian_log_density(&u, &prior.mean, &prior.cov)
                - gaussian_log_density(&u, &mean, &cov)
        })
        .collect();
    let top = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let avg = terms.iter().map(|t| (t - top).exp()).sum::<f64>() / samples as f64;
    (top + avg.ln()) / beta
}
