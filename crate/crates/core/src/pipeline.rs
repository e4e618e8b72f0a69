//! End-to-end orchestration: dataset, reward inference, policy solving and
//! counterfactual backtests, plus the files each stage writes.

use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::backtest::{alter_ego, BacktestReport, FundBacktest, Replay};
use crate::config::{GroupPaths, PipelineConfig};
use crate::error::{Error, Result};
use crate::glearner::{calibrate_beta, solve, GlearnerConfig, PriorPolicy};
use crate::io::{self, FitSummary, PolicyBundle, PolicySet};
use crate::market::{
    collect_trades, fit_prior, forecast, market_model_from_history, normalize, BenchmarkSeries, FittedArma,
    SectorReturns,
};
use crate::plot::{line_chart_svg, Series};
use crate::simgen::{generate_funds, generate_market_path, SimConfig};
use crate::trex::{cumulative_reward, fit_reward, ranking_metrics, FitResult, RankingMetrics};
use crate::types::{FundTrajectory, MarketModel, RankedDemoSet, RewardParams, YearMonth};

/// Fund panels over their full span together with the market data.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// Normalized to unit value at the start of each fund's panel.
    pub funds: Vec<FundTrajectory>,
    pub benchmark: BenchmarkSeries,
    pub returns: SectorReturns,
    /// Reward parameters the funds were simulated with, if synthetic.
    pub planted: Option<RewardParams>,
}

impl Dataset {
    /// Months covered by every fund.
    pub fn common_span(&self) -> Result<(YearMonth, YearMonth)> {
        let first = self
            .funds
            .first()
            .ok_or_else(|| Error::Data("no funds in dataset".into()))?;
        let mut lo = first.dates[0];
        let mut hi = *first.dates.last().unwrap();
        for f in &self.funds[1..] {
            lo = lo.max(f.dates[0]);
            hi = hi.min(*f.dates.last().unwrap());
        }
        if lo.months_until(hi) < 1 {
            return Err(Error::Data(format!("funds share no common months ({lo} to {hi})")));
        }
        Ok((lo, hi))
    }

    /// Every fund cut to `start..=start+horizon` and ranked by realized return.
    pub fn demos(&self, start: YearMonth, horizon: usize) -> Result<RankedDemoSet> {
        let trajs = self
            .funds
            .iter()
            .map(|f| f.window(date_index(f, start)?, horizon))
            .collect::<Result<Vec<_>>>()?;
        RankedDemoSet::from_returns(trajs)
    }
}

fn date_index(f: &FundTrajectory, date: YearMonth) -> Result<usize> {
    f.dates
        .iter()
        .position(|d| *d == date)
        .ok_or_else(|| Error::Data(format!("fund {} has no data for {date}", f.fund_id)))
}

/// Simulate a dataset from the generator settings.
pub fn synthetic_dataset(sim: &SimConfig) -> Result<Dataset> {
    let path = generate_market_path(sim)?;
    let demos = generate_funds(sim, &path)?;
    let steps = path.returns.nrows();
    Ok(Dataset {
        funds: demos.trajectories,
        benchmark: BenchmarkSeries::new(path.dates.clone(), path.benchmark.iter().copied().collect())?,
        returns: SectorReturns::new(path.dates[..steps].to_vec(), path.returns)?,
        planted: Some(sim.planted),
    })
}

/// The configured input files, or a synthetic dataset when none are given.
pub fn load_dataset(cfg: &PipelineConfig) -> Result<Dataset> {
    let data = &cfg.data;
    let (Some(holdings), Some(cashflows), Some(bench), Some(rets)) =
        (&data.holdings, &data.cashflows, &data.benchmark, &data.sector_returns)
    else {
        return synthetic_dataset(&cfg.simgen);
    };
    let mut raw = io::read_funds(holdings, cashflows)?;
    if let Some(a) = &data.aliases {
        io::apply_aliases(&mut raw, &io::read_aliases(a)?);
    }
    let benchmark = io::read_benchmark(bench)?;
    let returns = io::read_sector_returns(rets)?;
    let funds = raw
        .iter()
        .map(|f| normalize(f, &benchmark))
        .collect::<Result<Vec<_>>>()?;
    if let Some(f) = funds.iter().find(|f| f.n_sectors() != returns.returns.ncols()) {
        return Err(Error::Dimension(format!(
            "fund {} has {} sectors, sector returns have {}",
            f.fund_id,
            f.n_sectors(),
            returns.returns.ncols()
        )));
    }
    Ok(Dataset {
        funds,
        benchmark,
        returns,
        planted: None,
    })
}

/// Write the dataset in the same formats [`load_dataset`] reads.
pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    io::write_funds(&dir.join("holdings.csv"), &dir.join("cashflows.csv"), &ds.funds)?;
    io::write_benchmark(&dir.join("benchmark.csv"), &ds.benchmark)?;
    io::write_sector_returns(&dir.join("sector_returns.csv"), &ds.returns)
}

/// Training and test windows in months. The test window starts at the last
/// training state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Windows {
    pub train_start: YearMonth,
    pub train_horizon: usize,
    pub test_horizon: usize,
}

impl Windows {
    pub fn train_end(&self) -> YearMonth {
        self.train_start.plus(self.train_horizon as i64)
    }

    pub fn test_end(&self) -> YearMonth {
        self.train_end().plus(self.test_horizon as i64)
    }

    /// Apply the configured split to the dataset. Unset dates default to the
    /// generator's windows for synthetic data and to a two-thirds split of
    /// the common span otherwise.
    pub fn resolve(cfg: &PipelineConfig, ds: &Dataset) -> Result<Self> {
        let (lo, hi) = ds.common_span()?;
        let train_start = cfg.split.train_start.unwrap_or(lo);
        let default_train = if cfg.data.is_synthetic() {
            cfg.simgen.horizon as i64
        } else {
            ((2 * train_start.months_until(hi)) as f64 / 3.0).round().max(1.0) as i64
        };
        let train_end = cfg.split.train_end.unwrap_or(train_start.plus(default_train));
        let test_end = cfg.split.test_end.unwrap_or(hi);
        if train_start < lo || test_end > hi {
            return Err(Error::Config(format!(
                "split {train_start}..{test_end} lies outside the data span {lo}..{hi}"
            )));
        }
        let train_horizon = train_start.months_until(train_end);
        let test_horizon = train_end.months_until(test_end);
        if train_horizon < 1 || test_horizon < 0 {
            return Err(Error::Config(format!(
                "split dates {train_start}, {train_end}, {test_end} are out of order"
            )));
        }
        Ok(Self {
            train_start,
            train_horizon: train_horizon as usize,
            test_horizon: test_horizon as usize,
        })
    }
}

/// Expected-return models for both windows. The test model continues the
/// training fit's forecasts, so it uses no test-period data.
#[derive(Debug, Clone)]
pub struct Markets {
    pub train: MarketModel,
    pub test: Option<MarketModel>,
    pub arma: FittedArma,
}

pub fn market_models(cfg: &PipelineConfig, ds: &Dataset, win: &Windows) -> Result<Markets> {
    let history = ds.returns.rows_from(win.train_start, win.train_horizon)?;
    let (train, arma) = market_model_from_history(&history, cfg.market.arma, cfg.market.shrinkage)?;
    let test = if win.test_horizon > 0 {
        let means = forecast(&arma, win.test_horizon + 1);
        Some(MarketModel::new(means, train.covariance.clone())?)
    } else {
        None
    };
    Ok(Markets { train, test, arma })
}

/// Reward fit with its ranking diagnostics.
#[derive(Debug, Clone)]
pub struct IrlOutcome {
    pub fit: FitResult,
    pub train_metrics: RankingMetrics,
    pub test_metrics: Option<RankingMetrics>,
}

pub fn run_irl(
    cfg: &PipelineConfig,
    train: &RankedDemoSet,
    test: Option<&RankedDemoSet>,
    markets: &Markets,
) -> Result<IrlOutcome> {
    let fit = fit_reward(train, &markets.train, &cfg.trex)?;
    let train_metrics = ranking_metrics(train, &fit.params, &markets.train)?;
    let test_metrics = match (test, &markets.test) {
        (Some(d), Some(m)) if d.len() >= 2 => Some(ranking_metrics(d, &fit.params, m)?),
        _ => None,
    };
    Ok(IrlOutcome {
        fit,
        train_metrics,
        test_metrics,
    })
}

/// Benchmark and cashflow paths a policy is solved for.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannedPaths {
    pub benchmark: DVector<f64>,
    pub cashflow: DVector<f64>,
}

impl PlannedPaths {
    /// The fund's own paths over its window.
    pub fn realized(f: &FundTrajectory) -> Self {
        Self {
            benchmark: f.benchmark.clone(),
            cashflow: f.cashflow.clone(),
        }
    }

    /// Pointwise average over funds sharing one window.
    pub fn average(funds: &[FundTrajectory]) -> Result<Self> {
        let first = funds.first().ok_or_else(|| Error::Data("no funds to average".into()))?;
        let k = funds.len() as f64;
        let mut out = Self::realized(first);
        for f in &funds[1..] {
            crate::error::ensure_len("fund horizon", f.horizon(), first.horizon())?;
            out.benchmark += &f.benchmark;
            out.cashflow += &f.cashflow;
        }
        out.benchmark /= k;
        out.cashflow /= k;
        Ok(out)
    }

    /// Extrapolate past paths over `horizon` future months: the benchmark at
    /// its average past growth rate from 1, the flow at its past mean.
    pub fn projected(past: &Self, horizon: usize) -> Self {
        let steps = past.benchmark.len() - 1;
        let growth = (past.benchmark[steps] / past.benchmark[0]).powf(1.0 / steps.max(1) as f64);
        let flow = past.cashflow.mean();
        Self {
            benchmark: DVector::from_fn(horizon + 1, |t, _| growth.powi(t as i32)),
            cashflow: DVector::from_element(horizon + 1, flow),
        }
    }
}

/// Prior, temperature and policies for both windows.
#[derive(Debug, Clone)]
pub struct RlOutcome {
    pub prior: PriorPolicy,
    pub beta: f64,
    pub train: PolicySet,
    pub test: Option<PolicySet>,
}

/// Solve the control problem for `params`. An unset temperature is
/// calibrated on the funds' initial training states.
pub fn run_rl(
    cfg: &PipelineConfig,
    params: &RewardParams,
    train: &RankedDemoSet,
    markets: &Markets,
    win: &Windows,
) -> Result<RlOutcome> {
    let prior = fit_prior(&collect_trades(&train.trajectories), cfg.market.prior_covariance)?;
    let group_train = PlannedPaths::average(&train.trajectories)?;
    let beta = match cfg.glearner.beta {
        Some(b) => b,
        None => {
            let states: Vec<_> = train.trajectories.iter().map(|f| f.state(0)).collect();
            calibrate_beta(
                &markets.train,
                params,
                &prior,
                &group_train.benchmark,
                &group_train.cashflow,
                &cfg.glearner,
                &states,
            )?
        }
    };
    let gcfg = GlearnerConfig {
        beta: Some(beta),
        ..cfg.glearner
    };
    let bundle = |market: &MarketModel, start: YearMonth, paths: PlannedPaths| -> Result<PolicyBundle> {
        let sol = solve(market, params, &prior, &paths.benchmark, &paths.cashflow, &gcfg)?;
        Ok(PolicyBundle {
            start,
            policy: sol.policy,
            benchmark: paths.benchmark,
            planned_cashflow: paths.cashflow,
        })
    };
    let test_start = win.train_end();
    let (train_set, test_set) = match cfg.market.group_paths {
        GroupPaths::Average => {
            let tr = PolicySet::group(bundle(&markets.train, win.train_start, group_train.clone())?);
            let te = match &markets.test {
                Some(m) => Some(PolicySet::group(bundle(
                    m,
                    test_start,
                    PlannedPaths::projected(&group_train, win.test_horizon),
                )?)),
                None => None,
            };
            (tr, te)
        }
        GroupPaths::PerFund => {
            let mut tr = PolicySet::default();
            let mut te = markets.test.as_ref().map(|_| PolicySet::default());
            for f in &train.trajectories {
                let own = PlannedPaths::realized(f);
                if let (Some(set), Some(m)) = (te.as_mut(), &markets.test) {
                    let b = bundle(m, test_start, PlannedPaths::projected(&own, win.test_horizon))?;
                    set.0.insert(f.fund_id.clone(), b);
                }
                tr.0.insert(f.fund_id.clone(), bundle(&markets.train, win.train_start, own)?);
            }
            (tr, te)
        }
    };
    Ok(RlOutcome {
        prior,
        beta,
        train: train_set,
        test: test_set,
    })
}

/// Alter egos of every fund under the policies in `set`, each over the
/// window its policy was solved for.
pub fn run_backtest(ds: &Dataset, set: &PolicySet, window: &str) -> Result<BacktestReport> {
    let funds = ds
        .funds
        .iter()
        .map(|f| {
            let b = set.for_fund(&f.fund_id)?;
            let h = b.policy.horizon();
            let pm = f.window(date_index(f, b.start)?, h)?;
            let returns = ds.returns.rows_from(b.start, h)?;
            let ae = alter_ego(&b.policy, &pm, &returns, &b.planned_cashflow)?;
            FundBacktest::new(pm, ae)
        })
        .collect::<Result<Vec<_>>>()?;
    BacktestReport::new(window, funds)
}

/// Every fund replaying its own trades, reported over
/// `start..=start+horizon`. The replay runs over the fund's whole panel so
/// that it shares the panel's arithmetic; a nonzero curve means the recorded
/// holdings do not follow from the trades and realized returns.
pub fn run_replay(ds: &Dataset, start: YearMonth, horizon: usize, window: &str) -> Result<BacktestReport> {
    let funds = ds
        .funds
        .iter()
        .map(|f| {
            let idx = date_index(f, start)?;
            let returns = ds.returns.rows_from(f.dates[0], f.horizon())?;
            let ae = alter_ego(&Replay(f), f, &returns, &f.cashflow)?;
            FundBacktest::new(f.window(idx, horizon)?, ae.window(idx, horizon)?)
        })
        .collect::<Result<Vec<_>>>()?;
    BacktestReport::new(window, funds)
}

/// Per-fund cumulative fitted rewards of the alter egos and of every
/// demonstration, under the model of the window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardComparison {
    pub alter_ego: Vec<f64>,
    pub demos: Vec<f64>,
}

impl RewardComparison {
    pub fn new(report: &BacktestReport, params: &RewardParams, market: &MarketModel) -> Result<Self> {
        let ae = report
            .funds
            .iter()
            .map(|f| cumulative_reward(&f.ae, params, market))
            .collect::<Result<Vec<_>>>()?;
        let pm = report
            .funds
            .iter()
            .map(|f| cumulative_reward(&f.pm, params, market))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            alter_ego: ae,
            demos: pm,
        })
    }

    /// Smallest margin of any alter ego over the best demonstration.
    pub fn worst_margin(&self) -> f64 {
        let best = self.demos.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        self.alter_ego.iter().map(|a| a - best).fold(f64::INFINITY, f64::min)
    }
}

/// Everything the pipeline computes.
#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub dataset: Dataset,
    pub windows: Windows,
    pub markets: Markets,
    pub train_demos: RankedDemoSet,
    pub test_demos: Option<RankedDemoSet>,
    pub irl: IrlOutcome,
    pub rl: RlOutcome,
    pub train_report: BacktestReport,
    pub test_report: Option<BacktestReport>,
    pub train_rewards: RewardComparison,
}

pub fn run(cfg: &PipelineConfig) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let dataset = load_dataset(cfg)?;
    let windows = Windows::resolve(cfg, &dataset)?;
    let markets = market_models(cfg, &dataset, &windows)?;
    let train_demos = dataset.demos(windows.train_start, windows.train_horizon)?;
    let test_demos = if windows.test_horizon > 0 {
        Some(dataset.demos(windows.train_end(), windows.test_horizon)?)
    } else {
        None
    };
    let irl = run_irl(cfg, &train_demos, test_demos.as_ref(), &markets)?;
    let rl = run_rl(cfg, &irl.fit.params, &train_demos, &markets, &windows)?;
    let train_report = run_backtest(&dataset, &rl.train, "train")?;
    let test_report = rl
        .test
        .as_ref()
        .map(|set| run_backtest(&dataset, set, "test"))
        .transpose()?;
    let train_rewards = RewardComparison::new(&train_report, &irl.fit.params, &markets.train)?;
    Ok(PipelineOutcome {
        dataset,
        windows,
        markets,
        train_demos,
        test_demos,
        irl,
        rl,
        train_report,
        test_report,
        train_rewards,
    })
}

/// Headline numbers of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub windows: Windows,
    pub params: RewardParams,
    pub planted: Option<RewardParams>,
    pub reward_scale: f64,
    pub iterations: usize,
    pub converged: bool,
    pub train_metrics: RankingMetrics,
    pub test_metrics: Option<RankingMetrics>,
    pub beta: f64,
    pub train_final_outperformance: Vec<(String, f64)>,
    pub test_final_outperformance: Option<Vec<(String, f64)>>,
    pub in_sample_margin: f64,
}

impl Summary {
    pub fn new(o: &PipelineOutcome) -> Self {
        let finals = |r: &BacktestReport| {
            r.funds
                .iter()
                .map(|f| (f.fund_id().to_owned(), f.final_outperformance()))
                .collect::<Vec<_>>()
        };
        Self {
            windows: o.windows,
            params: o.irl.fit.params,
            planted: o.dataset.planted,
            reward_scale: o.irl.fit.reward_scale,
            iterations: o.irl.fit.iterations,
            converged: o.irl.fit.converged,
            train_metrics: o.irl.train_metrics,
            test_metrics: o.irl.test_metrics,
            beta: o.rl.beta,
            train_final_outperformance: finals(&o.train_report),
            test_final_outperformance: o.test_report.as_ref().map(finals),
            in_sample_margin: o.train_rewards.worst_margin(),
        }
    }
}

/// Realized return and cumulative fitted reward of each demonstration.
pub fn write_ranking(path: &Path, rows: &[(&str, &RankedDemoSet, &MarketModel)], params: &RewardParams) -> Result<()> {
    let header = ["window", "fund_id", "realized_return", "cumulative_reward"].map(String::from);
    let mut out = Vec::new();
    for (window, demos, market) in rows {
        for (traj, score) in demos.trajectories.iter().zip(&demos.scores) {
            out.push(vec![
                window.to_string(),
                traj.fund_id.clone(),
                io::fmt(*score),
                io::fmt(cumulative_reward(traj, params, market)?),
            ]);
        }
    }
    io::write_atomic(path, &io::csv_bytes(&header, out)?)
}

/// `{prefix}_funds.csv` with one row per fund and month, `{prefix}_group.csv`
/// with the group mean and one column per fund, and optionally SVG charts.
pub fn write_report(dir: &Path, prefix: &str, report: &BacktestReport, plots: bool) -> Result<()> {
    let header = [
        "t",
        "date",
        "fund_id",
        "pm_value",
        "ae_value",
        "outperformance",
        "outperformance_pct",
    ]
    .map(String::from);
    let mut rows = Vec::new();
    for f in &report.funds {
        let pct = f.outperformance_pct();
        for t in 0..=f.pm.horizon() {
            rows.push(vec![
                t.to_string(),
                f.pm.dates[t].to_string(),
                f.fund_id().to_owned(),
                io::fmt(f.pm.value(t)),
                io::fmt(f.ae.value(t)),
                io::fmt(f.outperformance[t]),
                io::fmt(pct[t]),
            ]);
        }
    }
    io::write_atomic(&dir.join(format!("{prefix}_funds.csv")), &io::csv_bytes(&header, rows)?)?;

    let mut header = vec!["t".to_owned(), "date".to_owned(), "mean".to_owned()];
    header.extend(report.funds.iter().map(|f| f.fund_id().to_owned()));
    let dates = report.funds.first().map(|f| f.pm.dates.clone()).unwrap_or_default();
    let rows = (0..=report.horizon()).map(|t| {
        let mut r = vec![
            t.to_string(),
            dates.get(t).map(|d| d.to_string()).unwrap_or_default(),
            io::fmt(report.group_mean[t]),
        ];
        r.extend(report.funds.iter().map(|f| io::fmt(f.outperformance[t])));
        r
    });
    io::write_atomic(&dir.join(format!("{prefix}_group.csv")), &io::csv_bytes(&header, rows)?)?;

    if plots {
        let mut series: Vec<Series> = report
            .funds
            .iter()
            .map(|f| Series {
                label: f.fund_id().to_owned(),
                values: f.outperformance.clone(),
            })
            .collect();
        let funds_svg = line_chart_svg(&format!("AE - PM by fund ({})", report.window), "value", &series)?;
        io::write_atomic(&dir.join(format!("{prefix}_funds.svg")), funds_svg.as_bytes())?;
        series.clear();
        series.push(Series {
            label: "mean".into(),
            values: report.group_mean.clone(),
        });
        let group_svg = line_chart_svg(&format!("AE - PM, group mean ({})", report.window), "value", &series)?;
        io::write_atomic(&dir.join(format!("{prefix}_group.svg")), group_svg.as_bytes())?;
    }
    Ok(())
}

pub fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn write_irl(
    dir: &Path,
    o: &IrlOutcome,
    rankings: &[(&str, &RankedDemoSet, &MarketModel)],
    plots: bool,
) -> Result<()> {
    create_dir(dir)?;
    io::write_fit(&dir.join("fit.toml"), &FitSummary::new(&o.fit, o.train_metrics))?;
    io::write_fit_trace(&dir.join("trace.csv"), &o.fit)?;
    write_ranking(&dir.join("ranking.csv"), rankings, &o.fit.params)?;
    if plots {
        let loss = [Series {
            label: "loss".into(),
            values: o.fit.loss_history.clone(),
        }];
        let svg = line_chart_svg("Pairwise ranking loss", "loss", &loss)?;
        io::write_atomic(&dir.join("loss.svg"), svg.as_bytes())?;
        let names = ["rho", "eta", "lam", "omega"];
        let params: Vec<Series> = names
            .iter()
            .enumerate()
            .map(|(i, n)| Series {
                label: (*n).into(),
                values: o.fit.param_history.iter().map(|p| p.to_array()[i]).collect(),
            })
            .collect();
        let svg = line_chart_svg("Reward parameters", "value", &params)?;
        io::write_atomic(&dir.join("params.svg"), svg.as_bytes())?;
    }
    Ok(())
}

pub fn write_rl(dir: &Path, o: &RlOutcome) -> Result<()> {
    create_dir(dir)?;
    io::write_policies(&dir.join("policy_train.json"), &o.train)?;
    if let Some(t) = &o.test {
        io::write_policies(&dir.join("policy_test.json"), t)?;
    }
    Ok(())
}

/// Write the full output tree under `out`.
pub fn write_outputs(out: &Path, cfg: &PipelineConfig, o: &PipelineOutcome) -> Result<()> {
    let plots = cfg.output.plots;
    let data = out.join("data");
    create_dir(&data)?;
    write_dataset(&data, &o.dataset)?;

    let mut rankings = vec![("train", &o.train_demos, &o.markets.train)];
    if let (Some(d), Some(m)) = (&o.test_demos, &o.markets.test) {
        rankings.push(("test", d, m));
    }
    write_irl(&out.join("irl"), &o.irl, &rankings, plots)?;
    write_rl(&out.join("rl"), &o.rl)?;

    let bt = out.join("backtest");
    create_dir(&bt)?;
    write_report(&bt, "train", &o.train_report, plots)?;
    if let Some(r) = &o.test_report {
        write_report(&bt, "test", r, plots)?;
    }
    let summary = toml::to_string(&Summary::new(o)).map_err(|e| Error::Data(format!("summary encoding: {e}")))?;
    io::write_atomic(&out.join("summary.toml"), summary.as_bytes())?;
    io::write_atomic(&out.join("config.toml"), cfg.to_toml()?.as_bytes())
}
