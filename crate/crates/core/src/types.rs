//! Domain types shared across the crate.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{ensure_len, Error, Result};
use crate::linalg::{self, PSD_TOL};

/// Calendar month, written as `YYYY-MM`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct YearMonth {
    year: i32,
    month: u32,
}

impl YearMonth {
    pub fn new(year: i32, month: u32) -> Result<Self> {
        if !(1..=12).contains(&month) {
            return Err(Error::Data(format!("month {month} out of range")));
        }
        Ok(Self { year, month })
    }

    pub fn year(self) -> i32 {
        self.year
    }

    pub fn month(self) -> u32 {
        self.month
    }

    pub fn succ(self) -> Self {
        self.plus(1)
    }

    pub fn plus(self, months: i64) -> Self {
        let idx = self.year as i64 * 12 + (self.month as i64 - 1) + months;
        Self {
            year: idx.div_euclid(12) as i32,
            month: idx.rem_euclid(12) as u32 + 1,
        }
    }

    /// Signed number of months from `self` to `other`.
    pub fn months_until(self, other: YearMonth) -> i64 {
        (other.year as i64 - self.year as i64) * 12 + other.month as i64 - self.month as i64
    }

    /// `n` consecutive months starting at `self`.
    pub fn series(self, n: usize) -> Vec<YearMonth> {
        (0..n as i64).map(|k| self.plus(k)).collect()
    }
}

impl fmt::Display for YearMonth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}", self.year, self.month)
    }
}

impl FromStr for YearMonth {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Data(format!("expected YYYY-MM date, got {s:?}"));
        let (y, m) = s.trim().split_once('-').ok_or_else(bad)?;
        if y.len() != 4 || m.len() != 2 {
            return Err(bad());
        }
        let year = y.parse().map_err(|_| bad())?;
        let month = m.parse().map_err(|_| bad())?;
        YearMonth::new(year, month)
    }
}

impl Serialize for YearMonth {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for YearMonth {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// The four reward parameters: benchmark weight, growth rate, flow-constraint
/// penalty and transaction-cost penalty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardParams {
    pub rho: f64,
    pub eta: f64,
    pub lam: f64,
    pub omega: f64,
}

impl Default for RewardParams {
    fn default() -> Self {
        Self {
            rho: 0.5,
            eta: 1.0,
            lam: 0.1,
            omega: 0.1,
        }
    }
}

impl RewardParams {
    pub fn new(rho: f64, eta: f64, lam: f64, omega: f64) -> Result<Self> {
        let p = Self { rho, eta, lam, omega };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.to_array().iter().all(|v| v.is_finite())
            && (0.0..=1.0).contains(&self.rho)
            && self.eta > 0.0
            && self.lam >= 0.0
            && self.omega >= 0.0;
        if !ok {
            return Err(Error::InvalidParameter(format!(
                "reward parameters out of bounds: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.rho, self.eta, self.lam, self.omega]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self {
            rho: a[0],
            eta: a[1],
            lam: a[2],
            omega: a[3],
        }
    }
}

/// Symmetric positive semi-definite sector return covariance.
///
/// Validated once at construction: asymmetry above 1e-12 (relative) or an
/// eigenvalue below -1e-8 is rejected, small negative eigenvalues are
/// clipped to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Covariance(DMatrix<f64>);

impl Covariance {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::Dimension(format!(
                "covariance must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("covariance has non-finite entries".into()));
        }
        if !linalg::is_symmetric(&m, 1e-12) {
            return Err(Error::Numerical(format!(
                "covariance is not symmetric (max asymmetry {:e})",
                linalg::asymmetry(&m)
            )));
        }
        let min_eig = linalg::min_eigenvalue(&m);
        if min_eig < -PSD_TOL {
            return Err(Error::Numerical(format!(
                "covariance is not positive semi-definite (min eigenvalue {min_eig:e})"
            )));
        }
        let m = if min_eig < 0.0 {
            linalg::clip_eigenvalues(&m, 0.0)
        } else {
            linalg::symmetrize(&m)
        };
        Ok(Self(m))
    }

    pub fn zeros(n: usize) -> Self {
        Self(DMatrix::zeros(n, n))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }
}

/// Expected sector returns per step plus a constant return covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketModel {
    /// `(T+1) x N`, row `t` holds the expected returns over step `t`.
    pub mean_returns: DMatrix<f64>,
    pub covariance: Covariance,
}

impl MarketModel {
    pub fn new(mean_returns: DMatrix<f64>, covariance: Covariance) -> Result<Self> {
        if mean_returns.ncols() != covariance.dim() {
            return Err(Error::Dimension(format!(
                "mean returns have {} sectors, covariance has {}",
                mean_returns.ncols(),
                covariance.dim()
            )));
        }
        if mean_returns.nrows() == 0 {
            return Err(Error::Dimension("market model has no time steps".into()));
        }
        Ok(Self {
            mean_returns,
            covariance,
        })
    }

    pub fn n_sectors(&self) -> usize {
        self.mean_returns.ncols()
    }

    pub fn horizon(&self) -> usize {
        self.mean_returns.nrows() - 1
    }

    pub fn mean_at(&self, t: usize) -> DVector<f64> {
        self.mean_returns.row(t).transpose()
    }

    /// Rows `start..=start+horizon` as a new model.
    pub fn window(&self, start: usize, horizon: usize) -> Result<Self> {
        if start + horizon > self.horizon() {
            return Err(Error::Dimension(format!(
                "window {start}..={} exceeds market horizon {}",
                start + horizon,
                self.horizon()
            )));
        }
        Ok(Self {
            mean_returns: self.mean_returns.rows(start, horizon + 1).into_owned(),
            covariance: self.covariance.clone(),
        })
    }
}

/// One fund's monthly sector holdings, trades, benchmark and net flows.
#[derive(Debug, Clone, PartialEq)]
pub struct FundTrajectory {
    pub fund_id: String,
    pub dates: Vec<YearMonth>,
    /// `(T+1) x N` sector positions.
    pub holdings: DMatrix<f64>,
    /// `(T+1) x N` changes in sector positions.
    pub trades: DMatrix<f64>,
    pub benchmark: DVector<f64>,
    pub cashflow: DVector<f64>,
    /// Set once values are expressed relative to the initial NAV.
    pub normalized: bool,
}

impl FundTrajectory {
    pub fn new(
        fund_id: impl Into<String>,
        dates: Vec<YearMonth>,
        holdings: DMatrix<f64>,
        trades: DMatrix<f64>,
        benchmark: DVector<f64>,
        cashflow: DVector<f64>,
        normalized: bool,
    ) -> Result<Self> {
        let t = Self {
            fund_id: fund_id.into(),
            dates,
            holdings,
            trades,
            benchmark,
            cashflow,
            normalized,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let rows = self.holdings.nrows();
        let n = self.holdings.ncols();
        if rows == 0 || n == 0 {
            return Err(Error::Dimension(format!("fund {}: empty trajectory", self.fund_id)));
        }
        if self.trades.nrows() != rows || self.trades.ncols() != n {
            return Err(Error::Dimension(format!(
                "fund {}: trades are {}x{}, holdings {rows}x{n}",
                self.fund_id,
                self.trades.nrows(),
                self.trades.ncols()
            )));
        }
        ensure_len("benchmark", self.benchmark.len(), rows)?;
        ensure_len("cashflow", self.cashflow.len(), rows)?;
        ensure_len("dates", self.dates.len(), rows)?;
        for w in self.dates.windows(2) {
            if w[0].succ() != w[1] {
                return Err(Error::Data(format!(
                    "fund {}: dates {} and {} are not consecutive months",
                    self.fund_id, w[0], w[1]
                )));
            }
        }
        let finite = self.holdings.iter().all(|v| v.is_finite())
            && self.trades.iter().all(|v| v.is_finite())
            && self.benchmark.iter().all(|v| v.is_finite())
            && self.cashflow.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::Data(format!("fund {}: non-finite values", self.fund_id)));
        }
        if self.normalized {
            let v0 = self.value(0);
            if (v0 - 1.0).abs() > 1e-9 || (self.benchmark[0] - 1.0).abs() > 1e-9 {
                return Err(Error::Data(format!(
                    "fund {}: flagged normalized but initial value {v0} / benchmark {}",
                    self.fund_id, self.benchmark[0]
                )));
            }
        }
        Ok(())
    }

    pub fn n_sectors(&self) -> usize {
        self.holdings.ncols()
    }

    pub fn horizon(&self) -> usize {
        self.holdings.nrows() - 1
    }

    pub fn state(&self, t: usize) -> DVector<f64> {
        self.holdings.row(t).transpose()
    }

    pub fn trade(&self, t: usize) -> DVector<f64> {
        self.trades.row(t).transpose()
    }

    /// Total portfolio value `1^T x_t`.
    pub fn value(&self, t: usize) -> f64 {
        self.holdings.row(t).sum()
    }

    pub fn values(&self) -> Vec<f64> {
        (0..=self.horizon()).map(|t| self.value(t)).collect()
    }

    pub fn require_normalized(&self) -> Result<()> {
        if !self.normalized {
            return Err(Error::Data(format!(
                "fund {}: raw-currency trajectory, normalize it first",
                self.fund_id
            )));
        }
        Ok(())
    }

    /// Rows `start..=start+horizon`, rescaled so the window starts at unit
    /// portfolio and benchmark value.
    pub fn window(&self, start: usize, horizon: usize) -> Result<Self> {
        if start + horizon > self.horizon() {
            return Err(Error::Dimension(format!(
                "fund {}: window {start}..={} exceeds horizon {}",
                self.fund_id,
                start + horizon,
                self.horizon()
            )));
        }
        let rows = horizon + 1;
        let nav = self.value(start);
        let b0 = self.benchmark[start];
        if nav <= 0.0 || b0 <= 0.0 {
            return Err(Error::Data(format!(
                "fund {}: non-positive value at window start",
                self.fund_id
            )));
        }
        let mut holdings = self.holdings.rows(start, rows).into_owned();
        let mut trades = self.trades.rows(start, rows).into_owned();
        let mut cashflow = self.cashflow.rows(start, rows).into_owned();
        let mut benchmark = self.benchmark.rows(start, rows).into_owned();
        if nav != 1.0 {
            holdings /= nav;
            trades /= nav;
            cashflow /= nav;
        }
        if b0 != 1.0 {
            benchmark /= b0;
        }
        Ok(Self {
            fund_id: self.fund_id.clone(),
            dates: self.dates[start..start + rows].to_vec(),
            holdings,
            trades,
            benchmark,
            cashflow,
            normalized: true,
        })
    }
}

/// Demonstrations with their ranking scores; `order` sorts scores ascending.
#[derive(Debug, Clone)]
pub struct RankedDemoSet {
    pub trajectories: Vec<FundTrajectory>,
    pub scores: Vec<f64>,
    pub order: Vec<usize>,
}

impl RankedDemoSet {
    /// Scores every trajectory by its flow-adjusted realized total return.
    pub fn from_returns(trajectories: Vec<FundTrajectory>) -> Result<Self> {
        let scores = trajectories
            .iter()
            .map(crate::reward::realized_total_return)
            .collect::<Result<Vec<_>>>()?;
        Self::with_scores(trajectories, scores)
    }

    pub fn with_scores(trajectories: Vec<FundTrajectory>, scores: Vec<f64>) -> Result<Self> {
        ensure_len("scores", scores.len(), trajectories.len())?;
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Data("non-finite ranking score".into()));
        }
        if let Some(first) = trajectories.first() {
            let (n, h) = (first.n_sectors(), first.horizon());
            for t in &trajectories {
                if t.n_sectors() != n || t.horizon() != h {
                    return Err(Error::Dimension(format!(
                        "fund {} is {}x{}, expected horizon {h} with {n} sectors",
                        t.fund_id,
                        t.horizon(),
                        t.n_sectors()
                    )));
                }
            }
        }
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
        Ok(Self {
            trajectories,
            scores,
            order,
        })
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn n_sectors(&self) -> usize {
        self.trajectories.first().map_or(0, |t| t.n_sectors())
    }

    pub fn horizon(&self) -> usize {
        self.trajectories.first().map_or(0, |t| t.horizon())
    }
}
