//! Data preparation: normalization against the benchmark, per-sector ARMA
//! forecasts of expected returns, residual covariance and the trade prior.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glearner::PriorPolicy;
use crate::linalg;
use crate::types::{Covariance, FundTrajectory, MarketModel, YearMonth};

/// Variance floor applied to covariance eigenvalues and prior variances.
pub const VARIANCE_FLOOR: f64 = 1e-10;

/// Minimum history length for an ARMA fit.
pub const MIN_ARMA_OBS: usize = 12;

/// Benchmark index levels by month.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkSeries {
    pub dates: Vec<YearMonth>,
    pub values: Vec<f64>,
}

impl BenchmarkSeries {
    pub fn new(dates: Vec<YearMonth>, values: Vec<f64>) -> Result<Self> {
        crate::error::ensure_len("benchmark values", values.len(), dates.len())?;
        check_consecutive("benchmark", &dates)?;
        if values.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::Data("benchmark levels must be positive and finite".into()));
        }
        Ok(Self { dates, values })
    }

    fn locate(&self, dates: &[YearMonth]) -> Result<usize> {
        let first = dates.first().ok_or_else(|| Error::Data("empty date range".into()))?;
        let start = self
            .dates
            .iter()
            .position(|d| d == first)
            .ok_or_else(|| Error::Data(format!("benchmark has no value for {first}")))?;
        if start + dates.len() > self.dates.len() {
            return Err(Error::Data(format!(
                "benchmark ends at {} before {}",
                self.dates.last().unwrap(),
                dates.last().unwrap()
            )));
        }
        Ok(start)
    }
}

/// Realized monthly sector returns; row `t` is the return from `dates[t]`
/// to the following month.
#[derive(Debug, Clone, PartialEq)]
pub struct SectorReturns {
    pub dates: Vec<YearMonth>,
    pub returns: DMatrix<f64>,
}

impl SectorReturns {
    pub fn new(dates: Vec<YearMonth>, returns: DMatrix<f64>) -> Result<Self> {
        crate::error::ensure_len("return rows", returns.nrows(), dates.len())?;
        check_consecutive("sector returns", &dates)?;
        if returns.iter().any(|r| !r.is_finite()) {
            return Err(Error::Data("sector returns must be finite".into()));
        }
        Ok(Self { dates, returns })
    }

    /// `count` rows starting at month `from`.
    pub fn rows_from(&self, from: YearMonth, count: usize) -> Result<DMatrix<f64>> {
        let start = self
            .dates
            .iter()
            .position(|d| *d == from)
            .ok_or_else(|| Error::Data(format!("no sector returns for {from}")))?;
        if start + count > self.dates.len() {
            return Err(Error::Data(format!(
                "sector returns end at {} but {count} months from {from} are needed",
                self.dates.last().unwrap()
            )));
        }
        Ok(self.returns.rows(start, count).into_owned())
    }
}

fn check_consecutive(what: &str, dates: &[YearMonth]) -> Result<()> {
    for w in dates.windows(2) {
        if w[0].succ() != w[1] {
            return Err(Error::Data(format!(
                "{what}: missing month between {} and {}",
                w[0], w[1]
            )));
        }
    }
    Ok(())
}

/// Express a fund relative to its initial NAV and replace its benchmark
/// path by the index rescaled to start at that NAV.
pub fn normalize(traj: &FundTrajectory, benchmark: &BenchmarkSeries) -> Result<FundTrajectory> {
    let start = benchmark.locate(&traj.dates)?;
    let nav = traj.value(0);
    if !(nav > 0.0) {
        return Err(Error::Data(format!(
            "fund {}: initial NAV {nav} is not positive",
            traj.fund_id
        )));
    }
    let rows = traj.horizon() + 1;
    let base = benchmark.values[start];
    let bench = DVector::from_iterator(rows, benchmark.values[start..start + rows].iter().map(|v| v / base));
    let mut out = traj.clone();
    if (nav - 1.0).abs() > 1e-12 {
        out.holdings /= nav;
        out.trades /= nav;
        out.cashflow /= nav;
    }
    out.benchmark = bench;
    out.normalized = true;
    out.validate()?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArmaSpec {
    pub p: usize,
    pub q: usize,
}

impl Default for ArmaSpec {
    fn default() -> Self {
        Self { p: 1, q: 1 }
    }
}

/// One sector's fitted ARMA(p, q):
/// `y_t = c + sum_i ar_i y_{t-i} + e_t + sum_j ma_j e_{t-j}`.
#[derive(Debug, Clone, PartialEq)]
pub struct SectorArma {
    pub intercept: f64,
    pub ar: Vec<f64>,
    pub ma: Vec<f64>,
    pub innovation_var: f64,
    /// Set when the fit was replaced by the sample-mean model.
    pub fallback: bool,
    /// Trailing observations and residuals, most recent last.
    recent_obs: Vec<f64>,
    recent_resid: Vec<f64>,
}

impl SectorArma {
    pub fn mean(&self) -> f64 {
        self.intercept / (1.0 - self.ar.iter().sum::<f64>())
    }

    /// Mean forecasts for the next `horizon` steps.
    pub fn forecast(&self, horizon: usize) -> Vec<f64> {
        let p = self.ar.len();
        let q = self.ma.len();
        let mut obs = self.recent_obs.clone();
        let mut resid = self.recent_resid.clone();
        let mut out = Vec::with_capacity(horizon);
        for _ in 0..horizon {
            let mut y = self.intercept;
            for i in 0..p {
                y += self.ar[i] * obs[obs.len() - 1 - i];
            }
            for j in 0..q {
                y += self.ma[j] * resid[resid.len() - 1 - j];
            }
            obs.push(y);
            resid.push(0.0);
            out.push(y);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FittedArma {
    pub spec: ArmaSpec,
    pub sectors: Vec<SectorArma>,
    /// In-sample one-step predictions, `T x N`.
    pub fitted: DMatrix<f64>,
    /// `observed - fitted`, `T x N`.
    pub residuals: DMatrix<f64>,
}

impl FittedArma {
    /// Residual rows that depend on a full lag window.
    pub fn usable_residuals(&self) -> DMatrix<f64> {
        let skip = self.spec.p.min(self.residuals.nrows().saturating_sub(2));
        self.residuals.rows(skip, self.residuals.nrows() - skip).into_owned()
    }
}

fn ols(design: &DMatrix<f64>, target: &DVector<f64>) -> Option<DVector<f64>> {
    let xtx = design.transpose() * design;
    let xty = design.transpose() * target;
    xtx.cholesky().map(|c| c.solve(&xty))
}

/// Conditional residuals and their derivatives with respect to
/// `(c, ar.., ma..)`.
fn css_residuals(y: &[f64], p: usize, q: usize, theta: &[f64], with_jac: bool) -> (Vec<f64>, DMatrix<f64>) {
    let n = y.len();
    let k = 1 + p + q;
    let mut e = vec![0.0; n];
    let mut jac = DMatrix::zeros(if with_jac { n } else { 0 }, k);
    for t in p..n {
        let mut et = y[t] - theta[0];
        for i in 0..p {
            et -= theta[1 + i] * y[t - 1 - i];
        }
        for j in 0..q {
            if t > j {
                et -= theta[1 + p + j] * e[t - 1 - j];
            }
        }
        e[t] = et;
        if with_jac {
            for col in 0..k {
                let mut d = if col == 0 {
                    -1.0
                } else if col <= p {
                    -y[t - col]
                } else {
                    let lag = col - p;
                    if t >= lag {
                        -e[t - lag]
                    } else {
                        0.0
                    }
                };
                for j in 0..q {
                    if t > j {
                        d -= theta[1 + p + j] * jac[(t - 1 - j, col)];
                    }
                }
                jac[(t, col)] = d;
            }
        }
    }
    (e, jac)
}

fn sse(e: &[f64]) -> f64 {
    e.iter().map(|v| v * v).sum()
}

/// Hannan-Rissanen starting values: long AR for proxy innovations, then
/// least squares on lagged observations and lagged proxies.
fn hannan_rissanen(y: &[f64], p: usize, q: usize) -> Option<Vec<f64>> {
    let n = y.len();
    let proxies = if q > 0 {
        let m = (p + q).max((n / 4).min(10));
        if n <= 2 * m + 1 {
            return None;
        }
        let rows = n - m;
        let mut x = DMatrix::zeros(rows, m + 1);
        let mut tgt = DVector::zeros(rows);
        for (r, t) in (m..n).enumerate() {
            x[(r, 0)] = 1.0;
            for i in 0..m {
                x[(r, 1 + i)] = y[t - 1 - i];
            }
            tgt[r] = y[t];
        }
        let b = ols(&x, &tgt)?;
        let mut e = vec![0.0; n];
        for (r, t) in (m..n).enumerate() {
            e[t] = tgt[r] - (x.row(r) * &b)[0];
        }
        Some((m, e))
    } else {
        None
    };
    let start = proxies.as_ref().map_or(p, |(m, _)| m + q).max(p);
    if n <= start + 1 + p + q {
        return None;
    }
    let rows = n - start;
    let k = 1 + p + q;
    let mut x = DMatrix::zeros(rows, k);
    let mut tgt = DVector::zeros(rows);
    for (r, t) in (start..n).enumerate() {
        x[(r, 0)] = 1.0;
        for i in 0..p {
            x[(r, 1 + i)] = y[t - 1 - i];
        }
        if let Some((_, e)) = &proxies {
            for j in 0..q {
                x[(r, 1 + p + j)] = e[t - 1 - j];
            }
        }
        tgt[r] = y[t];
    }
    ols(&x, &tgt).map(|b| b.iter().copied().collect())
}

/// Roots of `1 - sum c_i z^i` outside the unit circle, i.e. companion
/// eigenvalues strictly inside it.
fn roots_outside_unit_circle(coeffs: &[f64]) -> bool {
    let k = coeffs.len();
    if k == 0 {
        return true;
    }
    let mut comp = DMatrix::zeros(k, k);
    for i in 0..k {
        comp[(0, i)] = coeffs[i];
    }
    for i in 1..k {
        comp[(i, i - 1)] = 1.0;
    }
    comp.complex_eigenvalues().iter().all(|z| z.norm() < 1.0 - 1e-8)
}

fn mean_model(y: &[f64], p: usize, q: usize) -> SectorArma {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    SectorArma {
        intercept: mean,
        ar: vec![0.0; p],
        ma: vec![0.0; q],
        innovation_var: var,
        fallback: true,
        recent_obs: y[y.len().saturating_sub(p)..].to_vec(),
        recent_resid: vec![0.0; q],
    }
}

/// Conditional least squares for one series, Gauss-Newton from
/// Hannan-Rissanen starting values.
pub fn fit_sector(y: &[f64], spec: ArmaSpec) -> Result<SectorArma> {
    let (p, q) = (spec.p, spec.q);
    if y.len() < MIN_ARMA_OBS.max(p + q + 2) {
        return Err(Error::Data(format!(
            "ARMA({p},{q}) needs at least {} observations, got {}",
            MIN_ARMA_OBS.max(p + q + 2),
            y.len()
        )));
    }
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var <= 1e-14 * (1.0 + mean * mean) || p + q == 0 {
        return Ok(mean_model(y, p, q));
    }
    let Some(mut theta) = hannan_rissanen(y, p, q) else {
        return Ok(mean_model(y, p, q));
    };
    if !roots_outside_unit_circle(&theta[1 + p..].iter().map(|m| -m).collect::<Vec<_>>()) {
        // Start MA terms from zero when the initial estimate is not invertible.
        for m in theta[1 + p..].iter_mut() {
            *m = 0.0;
        }
    }
    let (mut e, mut jac) = css_residuals(y, p, q, &theta, true);
    let mut cost = sse(&e);
    let mut converged = false;
    for _ in 0..200 {
        let ev = DVector::from_column_slice(&e);
        let jtj = jac.transpose() * &jac;
        let jte = jac.transpose() * ev;
        let Some(chol) = (jtj + DMatrix::identity(theta.len(), theta.len()) * 1e-12).cholesky() else {
            break;
        };
        let step = chol.solve(&jte);
        let mut scale = 1.0;
        let mut improved = false;
        while scale > 1e-10 {
            let trial: Vec<f64> = theta.iter().zip(step.iter()).map(|(t, s)| t - scale * s).collect();
            let (te, _) = css_residuals(y, p, q, &trial, false);
            let tc = sse(&te);
            if tc.is_finite() && tc <= cost {
                let rel = (cost - tc) / cost.max(1e-300);
                theta = trial;
                cost = tc;
                improved = true;
                if rel < 1e-12 {
                    converged = true;
                }
                break;
            }
            scale *= 0.5;
        }
        if !improved {
            converged = true;
        }
        if converged {
            break;
        }
        (e, jac) = css_residuals(y, p, q, &theta, true);
    }
    let (e, _) = css_residuals(y, p, q, &theta, false);
    let ar = theta[1..1 + p].to_vec();
    let ma = theta[1 + p..].to_vec();
    let invertible = roots_outside_unit_circle(&ma.iter().map(|m| -m).collect::<Vec<_>>());
    if !converged || !cost.is_finite() || !roots_outside_unit_circle(&ar) || !invertible {
        return Ok(mean_model(y, p, q));
    }
    let used = (y.len() - p) as f64;
    Ok(SectorArma {
        intercept: theta[0],
        ar,
        ma,
        innovation_var: cost / used,
        fallback: false,
        recent_obs: y[y.len() - p..].to_vec(),
        recent_resid: e[e.len() - q..].to_vec(),
    })
}

/// In-sample one-step predictions of `y` under `model`.
fn one_step_predictions(y: &[f64], model: &SectorArma) -> Vec<f64> {
    let p = model.ar.len();
    let q = model.ma.len();
    if model.fallback {
        return vec![model.intercept; y.len()];
    }
    let mut theta = vec![model.intercept];
    theta.extend(&model.ar);
    theta.extend(&model.ma);
    let (e, _) = css_residuals(y, p, q, &theta, false);
    let mean = model.mean();
    (0..y.len()).map(|t| if t < p { mean } else { y[t] - e[t] }).collect()
}

/// Independent per-sector ARMA fits on a `T x N` return history.
pub fn fit_forecaster(sector_returns: &DMatrix<f64>, spec: ArmaSpec) -> Result<FittedArma> {
    let (rows, n) = sector_returns.shape();
    if rows < MIN_ARMA_OBS {
        return Err(Error::Data(format!(
            "need at least {MIN_ARMA_OBS} months of sector returns, got {rows}"
        )));
    }
    let mut sectors = Vec::with_capacity(n);
    let mut fitted = DMatrix::zeros(rows, n);
    for j in 0..n {
        let y: Vec<f64> = sector_returns.column(j).iter().copied().collect();
        let model = fit_sector(&y, spec)?;
        for (t, v) in one_step_predictions(&y, &model).into_iter().enumerate() {
            fitted[(t, j)] = v;
        }
        sectors.push(model);
    }
    let residuals = sector_returns - &fitted;
    Ok(FittedArma {
        spec,
        sectors,
        fitted,
        residuals,
    })
}

/// `horizon x N` mean forecasts following the end of the fitted sample.
pub fn forecast(fitted: &FittedArma, horizon: usize) -> DMatrix<f64> {
    let n = fitted.sectors.len();
    let mut out = DMatrix::zeros(horizon, n);
    for (j, s) in fitted.sectors.iter().enumerate() {
        for (h, v) in s.forecast(horizon).into_iter().enumerate() {
            out[(h, j)] = v;
        }
    }
    out
}

/// Residual covariance (denominator `T`) shrunk toward its diagonal by
/// `shrinkage`, with eigenvalues floored at [`VARIANCE_FLOOR`]. Fewer than
/// `N + 1` rows force a shrinkage of at least one half.
pub fn estimate_covariance(residuals: &DMatrix<f64>, shrinkage: f64) -> Result<Covariance> {
    let (rows, n) = residuals.shape();
    if rows == 0 {
        return Err(Error::Data("no residuals for covariance estimation".into()));
    }
    if !(0.0..=1.0).contains(&shrinkage) {
        return Err(Error::InvalidParameter(format!(
            "covariance shrinkage must lie in [0, 1], got {shrinkage}"
        )));
    }
    let mean = residuals.row_mean();
    let mut centered = residuals.clone();
    for mut row in centered.row_iter_mut() {
        row -= &mean;
    }
    let sample = centered.transpose() * &centered / rows as f64;
    let shrink = if rows < n + 1 { shrinkage.max(0.5) } else { shrinkage };
    let target = DMatrix::from_diagonal(&sample.diagonal());
    let blended = &sample * (1.0 - shrink) + target * shrink;
    Covariance::new(linalg::clip_eigenvalues(&blended, VARIANCE_FLOOR))
}

/// Expected returns for `t = 0..=T` (in-sample predictions, then the first
/// out-of-sample forecast) and the residual covariance.
pub fn market_model_from_history(
    sector_returns: &DMatrix<f64>,
    spec: ArmaSpec,
    shrinkage: f64,
) -> Result<(MarketModel, FittedArma)> {
    let fitted = fit_forecaster(sector_returns, spec)?;
    let covariance = estimate_covariance(&fitted.usable_residuals(), shrinkage)?;
    let rows = sector_returns.nrows();
    let mut mean = DMatrix::zeros(rows + 1, sector_returns.ncols());
    mean.rows_mut(0, rows).copy_from(&fitted.fitted);
    mean.rows_mut(rows, 1).copy_from(&forecast(&fitted, 1));
    Ok((MarketModel::new(mean, covariance)?, fitted))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorCovariance {
    #[default]
    Diagonal,
    Full,
}

/// Gaussian prior over trades: sample mean and per-sector sample variances
/// (denominator `n`), floored at [`VARIANCE_FLOOR`].
pub fn fit_prior(trades: &[DVector<f64>], kind: PriorCovariance) -> Result<PriorPolicy> {
    if trades.len() < 2 {
        return Err(Error::Data(format!(
            "prior fit needs at least 2 trade vectors, got {}",
            trades.len()
        )));
    }
    let n = trades[0].len();
    if trades.iter().any(|u| u.len() != n) {
        return Err(Error::Dimension("trade vectors differ in length".into()));
    }
    let count = trades.len() as f64;
    let mean = trades.iter().fold(DVector::zeros(n), |acc, u| acc + u) / count;
    let mut cov = DMatrix::zeros(n, n);
    for u in trades {
        let d = u - &mean;
        cov += &d * d.transpose();
    }
    cov /= count;
    match kind {
        PriorCovariance::Diagonal => PriorPolicy::diagonal(mean, cov.diagonal().map(|v| v.max(VARIANCE_FLOOR))),
        PriorCovariance::Full => PriorPolicy::new(mean, linalg::clip_eigenvalues(&cov, VARIANCE_FLOOR)),
    }
}

/// All trades `u_t`, `t = 0..=T`, of every trajectory.
pub fn collect_trades<'a>(trajs: impl IntoIterator<Item = &'a FundTrajectory>) -> Vec<DVector<f64>> {
    trajs
        .into_iter()
        .flat_map(|tr| (0..=tr.horizon()).map(move |t| tr.trade(t)))
        .collect()
}
