//! Synthetic sector markets and fund managers with planted reward
//! parameters.
//!
//! Each simulated manager trades, at every step, a blend of the myopic
//! optimum of the planted reward and a passive drift action, plus Gaussian
//! noise. Skill is the blend weight. The drift action invests the flow pro
//! rata and leaks a small fraction of the portfolio to uninvested cash, so
//! low skill costs return systematically rather than only through noise.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::glearner::reward_coefficients;
use crate::linalg::symmetrize;
use crate::reward::propagate_state;
use crate::types::{Covariance, FundTrajectory, RankedDemoSet, RewardParams, YearMonth};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub n_sectors: usize,
    /// Training horizon in months.
    pub horizon: usize,
    /// Additional months simulated after the training window.
    pub test_horizon: usize,
    pub n_funds: usize,
    pub planted: RewardParams,
    /// One entry per fund, each in `[0, 1]`.
    pub skill_levels: Vec<f64>,
    pub trade_noise: f64,
    /// Annualized expected sector returns.
    pub return_mean: Vec<f64>,
    /// Monthly sector return covariance.
    pub return_cov: Vec<Vec<f64>>,
    /// Sector weights of the benchmark index.
    pub market_weights: Vec<f64>,
    /// Relative dispersion of initial holdings around the market weights.
    pub holdings_dispersion: f64,
    /// Monthly net flow standard deviation as a fraction of portfolio value.
    pub cashflow_scale: f64,
    /// Monthly fraction of the portfolio the drift action moves to cash.
    pub cash_drag: f64,
    pub start: YearMonth,
    pub seed: u64,
}

/// Approximate GICS sector weights of a broad US index.
const DEFAULT_WEIGHTS: [f64; 11] = [0.045, 0.10, 0.07, 0.05, 0.13, 0.14, 0.09, 0.23, 0.025, 0.03, 0.09];
const DEFAULT_DRIFT: [f64; 11] = [0.06, 0.10, 0.06, 0.04, 0.09, 0.08, 0.07, 0.14, 0.05, 0.06, 0.03];
const DEFAULT_VOL: [f64; 11] = [
    0.070, 0.055, 0.040, 0.050, 0.045, 0.050, 0.055, 0.060, 0.055, 0.045, 0.040,
];

impl Default for SimConfig {
    fn default() -> Self {
        let n = 11;
        let corr = 0.6;
        let return_cov = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| {
                        let c = if i == j { 1.0 } else { corr };
                        c * DEFAULT_VOL[i] * DEFAULT_VOL[j]
                    })
                    .collect()
            })
            .collect();
        Self {
            n_sectors: n,
            horizon: 24,
            test_horizon: 12,
            n_funds: 6,
            planted: RewardParams {
                rho: 0.9,
                eta: 1.25,
                lam: 0.08,
                omega: 0.1,
            },
            skill_levels: vec![0.05, 0.25, 0.45, 0.65, 0.85, 1.0],
            trade_noise: 0.001,
            return_mean: DEFAULT_DRIFT.to_vec(),
            return_cov,
            market_weights: DEFAULT_WEIGHTS.to_vec(),
            holdings_dispersion: 0.1,
            cashflow_scale: 0.002,
            cash_drag: 0.01,
            start: YearMonth::new(2017, 1).expect("valid month"),
            seed: 7,
        }
    }
}

impl SimConfig {
    pub fn total_horizon(&self) -> usize {
        self.horizon + self.test_horizon
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_sectors;
        if n == 0 || self.horizon == 0 {
            return Err(Error::InvalidParameter("n_sectors and horizon must be positive".into()));
        }
        if self.n_funds < 2 {
            return Err(Error::InvalidParameter("need at least 2 funds".into()));
        }
        ensure_len("skill_levels", self.skill_levels.len(), self.n_funds)?;
        if self.skill_levels.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::InvalidParameter("skill levels must lie in [0, 1]".into()));
        }
        ensure_len("return_mean", self.return_mean.len(), n)?;
        ensure_len("market_weights", self.market_weights.len(), n)?;
        ensure_len("return_cov rows", self.return_cov.len(), n)?;
        for row in &self.return_cov {
            ensure_len("return_cov columns", row.len(), n)?;
        }
        if !(self.trade_noise >= 0.0
            && self.cashflow_scale >= 0.0
            && self.holdings_dispersion >= 0.0
            && (0.0..1.0).contains(&self.cash_drag))
        {
            return Err(Error::InvalidParameter(
                "noise, dispersion, cashflow and drag scales must be non-negative".into(),
            ));
        }
        if self.market_weights.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::InvalidParameter("market weights must be positive".into()));
        }
        self.planted.validate()?;
        self.covariance().map(|_| ())
    }

    pub fn covariance(&self) -> Result<Covariance> {
        let n = self.n_sectors;
        Covariance::new(DMatrix::from_fn(n, n, |i, j| self.return_cov[i][j]))
    }

    pub fn monthly_mean(&self) -> DVector<f64> {
        DVector::from_iterator(self.n_sectors, self.return_mean.iter().map(|m| m / 12.0))
    }

    fn weights(&self) -> DVector<f64> {
        let w = DVector::from_row_slice(&self.market_weights);
        let s = w.sum();
        w / s
    }
}

/// Realized sector returns and benchmark levels.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketPath {
    /// `T_total + 1` months; states live on every date.
    pub dates: Vec<YearMonth>,
    /// `T_total x N`, row `t` is the return from `dates[t]` to `dates[t+1]`.
    pub returns: DMatrix<f64>,
    /// Benchmark level on every date, starting at 1.
    pub benchmark: DVector<f64>,
}

/// Symmetric square root of a PSD matrix (handles singular covariances).
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let root = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose()
}

fn standard_normals(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

fn fund_rng(seed: u64, fund: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (fund as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Gaussian monthly sector returns; the benchmark earns the
/// market-weighted sector return.
pub fn generate_market_path(cfg: &SimConfig) -> Result<MarketPath> {
    cfg.validate()?;
    let n = cfg.n_sectors;
    let steps = cfg.total_horizon();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let root = psd_sqrt(cfg.covariance()?.matrix());
    let drift = cfg.monthly_mean();
    let weights = cfg.weights();
    let mut returns = DMatrix::zeros(steps, n);
    let mut benchmark = DVector::zeros(steps + 1);
    benchmark[0] = 1.0;
    for t in 0..steps {
        let r = &drift + &root * standard_normals(&mut rng, n);
        benchmark[t + 1] = benchmark[t] * (1.0 + weights.dot(&r));
        returns.set_row(t, &r.transpose());
    }
    Ok(MarketPath {
        dates: cfg.start.series(steps + 1),
        returns,
        benchmark,
    })
}

/// Anonymized single-letter fund names, as used for the real fund groups.
pub fn fund_name(i: usize) -> String {
    if i < 26 {
        char::from(b'A' + i as u8).to_string()
    } else {
        format!("F{i:03}")
    }
}

fn simulate_fund(cfg: &SimConfig, path: &MarketPath, fund: usize) -> Result<FundTrajectory> {
    let n = cfg.n_sectors;
    let steps = path.returns.nrows();
    let mut rng = fund_rng(cfg.seed, fund);
    let skill = cfg.skill_levels[fund];
    let sigma = cfg.covariance()?;
    let drift = cfg.monthly_mean();

    let tilt = standard_normals(&mut rng, n) * cfg.holdings_dispersion;
    let raw = cfg.weights().component_mul(&tilt.map(|e| (1.0 + e).max(0.05)));
    let mut x = &raw / raw.sum();

    let mut holdings = DMatrix::zeros(steps + 1, n);
    let mut trades = DMatrix::zeros(steps + 1, n);
    let mut cashflow = DVector::zeros(steps + 1);
    for t in 0..=steps {
        let value = x.sum();
        let flow = cfg.cashflow_scale * value * rng.sample::<f64, _>(StandardNormal);
        let reward = reward_coefficients(&cfg.planted, &drift, &sigma, path.benchmark[t], flow)?;
        let greedy = reward.argmax_action(&x).map_err(Error::at_step(t))?;
        let passive = &x * (flow / value - cfg.cash_drag);
        let noise = standard_normals(&mut rng, n) * cfg.trade_noise;
        let u = greedy * skill + passive * (1.0 - skill) + noise;
        holdings.set_row(t, &x.transpose());
        trades.set_row(t, &u.transpose());
        cashflow[t] = flow;
        if t < steps {
            x = propagate_state(&x, &u, &path.returns.row(t).transpose())?;
        }
    }
    FundTrajectory::new(
        fund_name(fund),
        path.dates.clone(),
        holdings,
        trades,
        path.benchmark.clone(),
        cashflow,
        true,
    )
}

/// Simulate every fund over the full path and rank by realized return.
pub fn generate_funds(cfg: &SimConfig, path: &MarketPath) -> Result<RankedDemoSet> {
    cfg.validate()?;
    if path.returns.ncols() != cfg.n_sectors {
        return Err(Error::Dimension(format!(
            "market path has {} sectors, config {}",
            path.returns.ncols(),
            cfg.n_sectors
        )));
    }
    let funds = (0..cfg.n_funds)
        .map(|f| simulate_fund(cfg, path, f))
        .collect::<Result<Vec<_>>>()?;
    RankedDemoSet::from_returns(funds)
}

/// True when every pair of scores is tied, so no ranking information exists.
pub fn ranking_is_degenerate(demos: &RankedDemoSet) -> bool {
    demos
        .scores
        .iter()
        .all(|s| (s - demos.scores[0]).abs() < crate::trex::TIE_TOL)
}

/// Largest deviation between stored holdings and holdings rebuilt from the
/// initial state, the trades and the realized returns.
pub fn propagation_residual(traj: &FundTrajectory, returns: &DMatrix<f64>) -> Result<f64> {
    let mut x = traj.state(0);
    let mut worst: f64 = 0.0;
    for t in 0..traj.horizon() {
        x = propagate_state(&x, &traj.trade(t), &returns.row(t).transpose())?;
        worst = worst.max((&x - traj.state(t + 1)).amax());
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_covariance_path_is_the_drift() {
        let cfg = SimConfig {
            return_cov: vec![vec![0.0; 11]; 11],
            ..SimConfig::default()
        };
        let path = generate_market_path(&cfg).unwrap();
        let drift = cfg.monthly_mean();
        for t in 0..path.returns.nrows() {
            assert!((path.returns.row(t).transpose() - &drift).amax() < 1e-15);
        }
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let cfg = SimConfig::default();
        let a = generate_market_path(&cfg).unwrap();
        let b = generate_market_path(&cfg).unwrap();
        assert_eq!(a, b);
        let fa = generate_funds(&cfg, &a).unwrap();
        let fb = generate_funds(&cfg, &b).unwrap();
        assert_eq!(fa.trajectories, fb.trajectories);
        assert_eq!(fa.scores, fb.scores);
    }

    #[test]
    fn generated_funds_satisfy_invariants() {
        let cfg = SimConfig::default();
        let path = generate_market_path(&cfg).unwrap();
        let demos = generate_funds(&cfg, &path).unwrap();
        assert_eq!(demos.len(), 6);
        for t in &demos.trajectories {
            t.validate().unwrap();
            assert!((t.value(0) - 1.0).abs() < 1e-12);
            assert!(propagation_residual(t, &path.returns).unwrap() < 1e-12);
        }
    }

    #[test]
    fn identical_managers_are_flagged_degenerate() {
        let cfg = SimConfig {
            skill_levels: vec![1.0; 4],
            n_funds: 4,
            trade_noise: 0.0,
            holdings_dispersion: 0.0,
            cashflow_scale: 0.0,
            return_cov: vec![vec![0.0; 11]; 11],
            ..SimConfig::default()
        };
        let path = generate_market_path(&cfg).unwrap();
        let demos = generate_funds(&cfg, &path).unwrap();
        assert!(ranking_is_degenerate(&demos));
        assert!(crate::trex::ranked_pairs(&demos, true).is_err());
    }

    #[test]
    fn invalid_config_is_rejected() {
        let mut cfg = SimConfig::default();
        cfg.skill_levels.pop();
        assert!(generate_market_path(&cfg).is_err());
        let mut cfg = SimConfig::default();
        cfg.return_cov[0][1] = 1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn fund_names_are_letters() {
        assert_eq!(fund_name(0), "A");
        assert_eq!(fund_name(25), "Z");
        assert_eq!(fund_name(26), "F026");
    }
}
