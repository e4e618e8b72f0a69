//! File formats: monthly panel CSVs for funds, flows, benchmark and sector
//! returns; JSON policies; TOML fit summaries. Every writer replaces its
//! target atomically.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glearner::{GaussianPolicy, PolicyStep};
use crate::market::{BenchmarkSeries, SectorReturns};
use crate::trex::{FitResult, RankingMetrics};
use crate::types::{FundTrajectory, RewardParams, YearMonth};

/// Write `bytes` to a sibling temporary file, then rename it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.{}.tmp", name.to_string_lossy(), std::process::id()));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// `s01`, `s02`, ... column names.
pub fn sector_columns(n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("s{i:02}")).collect()
}

struct CsvTable {
    path: PathBuf,
    header: Vec<String>,
    rows: Vec<(u64, csv::StringRecord)>,
}

impl CsvTable {
    fn read(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let header = reader
            .headers()
            .map_err(|e| Self::csv_error(path, &e))?
            .iter()
            .map(str::to_owned)
            .collect();
        let mut rows = Vec::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| Self::csv_error(path, &e))?;
            let line = rec.position().map_or(0, |p| p.line());
            rows.push((line, rec));
        }
        Ok(Self {
            path: path.to_owned(),
            header,
            rows,
        })
    }

    fn csv_error(path: &Path, e: &csv::Error) -> Error {
        Error::Parse {
            path: path.to_owned(),
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        }
    }

    fn error(&self, line: u64, msg: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.clone(),
            line,
            msg: msg.into(),
        }
    }

    fn expect_prefix(&self, prefix: &[&str]) -> Result<usize> {
        let ok = self.header.len() >= prefix.len() && self.header.iter().zip(prefix).all(|(h, p)| h == p);
        if !ok {
            return Err(self.error(1, format!("header must start with {}", prefix.join(","))));
        }
        let n = self.header.len() - prefix.len();
        if self.header[prefix.len()..] != sector_columns(n)[..] {
            return Err(self.error(1, format!("sector columns must be s01..s{n:02}")));
        }
        Ok(n)
    }

    fn expect_exact(&self, cols: &[&str]) -> Result<()> {
        if self.header.iter().map(String::as_str).ne(cols.iter().copied()) {
            return Err(self.error(1, format!("header must be {}", cols.join(","))));
        }
        Ok(())
    }

    fn date(&self, line: u64, field: &str) -> Result<YearMonth> {
        field.parse().map_err(|e: Error| self.error(line, e.to_string()))
    }

    fn number(&self, line: u64, field: &str) -> Result<f64> {
        let v: f64 = field
            .parse()
            .map_err(|_| self.error(line, format!("not a number: {field:?}")))?;
        if !v.is_finite() {
            return Err(self.error(line, format!("non-finite value {field}")));
        }
        Ok(v)
    }

    fn numbers(&self, line: u64, rec: &csv::StringRecord, from: usize) -> Result<Vec<f64>> {
        rec.iter().skip(from).map(|f| self.number(line, f)).collect()
    }
}

/// Consecutive months from a keyed set, failing on any gap.
fn consecutive<T>(table: &CsvTable, what: &str, map: &BTreeMap<YearMonth, T>) -> Result<Vec<YearMonth>> {
    let dates: Vec<YearMonth> = map.keys().copied().collect();
    for w in dates.windows(2) {
        if w[0].succ() != w[1] {
            return Err(table.error(0, format!("{what}: missing month between {} and {}", w[0], w[1])));
        }
    }
    Ok(dates)
}

#[derive(Default)]
struct FundRows {
    holding: BTreeMap<YearMonth, Vec<f64>>,
    trade: BTreeMap<YearMonth, Vec<f64>>,
}

/// Read fund panels from the holdings/trades CSV and the cashflow CSV.
/// Benchmarks are left at zero and the result is not normalized; pass each
/// fund through [`crate::market::normalize`].
pub fn read_funds(holdings_csv: &Path, cashflow_csv: &Path) -> Result<Vec<FundTrajectory>> {
    let table = CsvTable::read(holdings_csv)?;
    let n = table.expect_prefix(&["date", "fund_id", "kind"])?;
    if n == 0 {
        return Err(table.error(1, "no sector columns"));
    }
    let mut funds: BTreeMap<String, FundRows> = BTreeMap::new();
    for (line, rec) in &table.rows {
        let line = *line;
        if rec.len() != n + 3 {
            return Err(table.error(line, format!("expected {} fields, got {}", n + 3, rec.len())));
        }
        let date = table.date(line, &rec[0])?;
        let entry = funds.entry(rec[1].to_owned()).or_default();
        let slot = match &rec[2] {
            "holding" => &mut entry.holding,
            "trade" => &mut entry.trade,
            other => return Err(table.error(line, format!("kind must be holding or trade, got {other:?}"))),
        };
        if slot.insert(date, table.numbers(line, rec, 3)?).is_some() {
            return Err(table.error(line, format!("duplicate {} row for {} at {date}", &rec[2], &rec[1])));
        }
    }

    let flows_table = CsvTable::read(cashflow_csv)?;
    flows_table.expect_exact(&["date", "fund_id", "cashflow"])?;
    let mut flows: HashMap<String, BTreeMap<YearMonth, f64>> = HashMap::new();
    for (line, rec) in &flows_table.rows {
        let line = *line;
        if rec.len() != 3 {
            return Err(flows_table.error(line, "expected 3 fields"));
        }
        let date = flows_table.date(line, &rec[0])?;
        let v = flows_table.number(line, &rec[2])?;
        if flows.entry(rec[1].to_owned()).or_default().insert(date, v).is_some() {
            return Err(flows_table.error(line, format!("duplicate cashflow for {} at {date}", &rec[1])));
        }
    }

    let mut out = Vec::with_capacity(funds.len());
    for (id, rows) in funds {
        let dates = consecutive(&table, &format!("fund {id} holdings"), &rows.holding)?;
        let trade_dates: Vec<YearMonth> = rows.trade.keys().copied().collect();
        if trade_dates != dates {
            return Err(table.error(0, format!("fund {id}: trade months do not match holding months")));
        }
        let fund_flows = flows
            .remove(&id)
            .ok_or_else(|| flows_table.error(0, format!("no cashflows for fund {id}")))?;
        let flow_dates: Vec<YearMonth> = fund_flows.keys().copied().collect();
        if flow_dates != dates {
            return Err(flows_table.error(0, format!("fund {id}: cashflow months do not match holding months")));
        }
        let rows_n = dates.len();
        let holdings = DMatrix::from_row_iterator(rows_n, n, rows.holding.values().flatten().copied());
        let trades = DMatrix::from_row_iterator(rows_n, n, rows.trade.values().flatten().copied());
        let cashflow = DVector::from_iterator(rows_n, fund_flows.values().copied());
        out.push(FundTrajectory::new(
            id,
            dates,
            holdings,
            trades,
            DVector::zeros(rows_n),
            cashflow,
            false,
        )?);
    }
    if let Some(extra) = flows.keys().next() {
        return Err(flows_table.error(0, format!("cashflows for unknown fund {extra}")));
    }
    if out.is_empty() {
        return Err(table.error(0, "no fund rows"));
    }
    Ok(out)
}

pub(crate) fn csv_bytes(header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let conv = |e: csv::Error| Error::Data(format!("csv encoding: {e}"));
    w.write_record(header).map_err(conv)?;
    for r in rows {
        w.write_record(&r).map_err(conv)?;
    }
    w.into_inner().map_err(|e| Error::Data(format!("csv encoding: {e}")))
}

pub(crate) fn fmt(v: f64) -> String {
    v.to_string()
}

/// Write funds in the two-file panel layout read by [`read_funds`].
pub fn write_funds(holdings_csv: &Path, cashflow_csv: &Path, funds: &[FundTrajectory]) -> Result<()> {
    let n = funds.first().map_or(0, FundTrajectory::n_sectors);
    let mut header: Vec<String> = ["date", "fund_id", "kind"].map(String::from).to_vec();
    header.extend(sector_columns(n));
    let mut rows = Vec::new();
    for f in funds {
        for t in 0..=f.horizon() {
            for (kind, m) in [("holding", &f.holdings), ("trade", &f.trades)] {
                let mut r = vec![f.dates[t].to_string(), f.fund_id.clone(), kind.to_owned()];
                r.extend(m.row(t).iter().map(|v| fmt(*v)));
                rows.push(r);
            }
        }
    }
    write_atomic(holdings_csv, &csv_bytes(&header, rows)?)?;
    let flows = funds.iter().flat_map(|f| {
        (0..=f.horizon()).map(move |t| vec![f.dates[t].to_string(), f.fund_id.clone(), fmt(f.cashflow[t])])
    });
    write_atomic(
        cashflow_csv,
        &csv_bytes(&["date", "fund_id", "cashflow"].map(String::from), flows)?,
    )
}

pub fn read_benchmark(path: &Path) -> Result<BenchmarkSeries> {
    let table = CsvTable::read(path)?;
    table.expect_exact(&["date", "value"])?;
    let mut map = BTreeMap::new();
    for (line, rec) in &table.rows {
        if rec.len() != 2 {
            return Err(table.error(*line, "expected 2 fields"));
        }
        let d = table.date(*line, &rec[0])?;
        if map.insert(d, table.number(*line, &rec[1])?).is_some() {
            return Err(table.error(*line, format!("duplicate month {d}")));
        }
    }
    let dates = consecutive(&table, "benchmark", &map)?;
    BenchmarkSeries::new(dates, map.into_values().collect())
}

pub fn write_benchmark(path: &Path, series: &BenchmarkSeries) -> Result<()> {
    let rows = series
        .dates
        .iter()
        .zip(&series.values)
        .map(|(d, v)| vec![d.to_string(), fmt(*v)]);
    write_atomic(path, &csv_bytes(&["date", "value"].map(String::from), rows)?)
}

/// Sector returns, one row per month: the return earned from that month to
/// the next.
pub fn read_sector_returns(path: &Path) -> Result<SectorReturns> {
    let table = CsvTable::read(path)?;
    let n = table.expect_prefix(&["date"])?;
    let mut map = BTreeMap::new();
    for (line, rec) in &table.rows {
        if rec.len() != n + 1 {
            return Err(table.error(*line, format!("expected {} fields, got {}", n + 1, rec.len())));
        }
        let d = table.date(*line, &rec[0])?;
        if map.insert(d, table.numbers(*line, rec, 1)?).is_some() {
            return Err(table.error(*line, format!("duplicate month {d}")));
        }
    }
    let dates = consecutive(&table, "sector returns", &map)?;
    let rows = dates.len();
    SectorReturns::new(dates, DMatrix::from_row_iterator(rows, n, map.into_values().flatten()))
}

pub fn write_sector_returns(path: &Path, returns: &SectorReturns) -> Result<()> {
    let mut header = vec!["date".to_owned()];
    header.extend(sector_columns(returns.returns.ncols()));
    let rows = returns.dates.iter().enumerate().map(|(t, d)| {
        let mut r = vec![d.to_string()];
        r.extend(returns.returns.row(t).iter().map(|v| fmt(*v)));
        r
    });
    write_atomic(path, &csv_bytes(&header, rows)?)
}

/// Two-column `fund_id,alias` map for anonymizing fund names.
pub fn read_aliases(path: &Path) -> Result<HashMap<String, String>> {
    let table = CsvTable::read(path)?;
    table.expect_exact(&["fund_id", "alias"])?;
    let mut map = HashMap::new();
    for (line, rec) in &table.rows {
        if rec.len() != 2 {
            return Err(table.error(*line, "expected 2 fields"));
        }
        if map.insert(rec[0].to_owned(), rec[1].to_owned()).is_some() {
            return Err(table.error(*line, format!("duplicate alias for {}", &rec[0])));
        }
    }
    Ok(map)
}

/// Rename funds through `aliases`; funds without an entry keep their id.
pub fn apply_aliases(funds: &mut [FundTrajectory], aliases: &HashMap<String, String>) {
    for f in funds {
        if let Some(a) = aliases.get(&f.fund_id) {
            f.fund_id = a.clone();
        }
    }
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn matrix_of(what: &str, rows: &[Vec<f64>], n: usize) -> Result<DMatrix<f64>> {
    if rows.len() != n || rows.iter().any(|r| r.len() != n) {
        return Err(Error::Dimension(format!("{what} must be {n}x{n}")));
    }
    Ok(DMatrix::from_row_iterator(n, n, rows.iter().flatten().copied()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StepFile {
    intercept: Vec<f64>,
    gain: Vec<Vec<f64>>,
    cov: Vec<Vec<f64>>,
}

/// A solved policy together with the window and paths it was solved for.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyBundle {
    pub start: YearMonth,
    pub policy: GaussianPolicy,
    pub benchmark: DVector<f64>,
    pub planned_cashflow: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyFile {
    start: YearMonth,
    beta: f64,
    benchmark: Vec<f64>,
    planned_cashflow: Vec<f64>,
    steps: Vec<StepFile>,
}

/// Key under which a policy shared by the whole group is stored.
pub const GROUP_KEY: &str = "group";

/// Policies keyed by fund id, or a single one under [`GROUP_KEY`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PolicySet(pub BTreeMap<String, PolicyBundle>);

impl PolicySet {
    pub fn group(bundle: PolicyBundle) -> Self {
        Self(BTreeMap::from([(GROUP_KEY.to_owned(), bundle)]))
    }

    /// The fund's own policy, else the group policy.
    pub fn for_fund(&self, fund_id: &str) -> Result<&PolicyBundle> {
        self.0
            .get(fund_id)
            .or_else(|| self.0.get(GROUP_KEY))
            .ok_or_else(|| Error::Data(format!("no policy for fund {fund_id}")))
    }
}

fn bundle_to_file(bundle: &PolicyBundle) -> PolicyFile {
    PolicyFile {
        start: bundle.start,
        beta: bundle.policy.beta,
        benchmark: bundle.benchmark.iter().copied().collect(),
        planned_cashflow: bundle.planned_cashflow.iter().copied().collect(),
        steps: bundle
            .policy
            .steps
            .iter()
            .map(|s| StepFile {
                intercept: s.intercept.iter().copied().collect(),
                gain: rows_of(&s.gain),
                cov: rows_of(&s.cov),
            })
            .collect(),
    }
}

fn bundle_from_file(file: PolicyFile) -> Result<PolicyBundle> {
    let steps = file
        .steps
        .iter()
        .enumerate()
        .map(|(t, s)| {
            let n = s.intercept.len();
            PolicyStep::new(
                DVector::from_vec(s.intercept.clone()),
                matrix_of("gain", &s.gain, n)?,
                matrix_of("cov", &s.cov, n)?,
            )
            .map_err(Error::at_step(t))
        })
        .collect::<Result<Vec<_>>>()?;
    if steps.is_empty() {
        return Err(Error::Data("policy has no steps".into()));
    }
    crate::error::ensure_len("policy benchmark", file.benchmark.len(), steps.len())?;
    crate::error::ensure_len("policy cashflow", file.planned_cashflow.len(), steps.len())?;
    Ok(PolicyBundle {
        start: file.start,
        policy: GaussianPolicy { beta: file.beta, steps },
        benchmark: DVector::from_vec(file.benchmark),
        planned_cashflow: DVector::from_vec(file.planned_cashflow),
    })
}

pub fn policies_to_json(set: &PolicySet) -> Result<String> {
    let files: BTreeMap<&str, PolicyFile> = set.0.iter().map(|(k, b)| (k.as_str(), bundle_to_file(b))).collect();
    serde_json::to_string_pretty(&files).map_err(|e| Error::Data(format!("policy encoding: {e}")))
}

pub fn policies_from_json(text: &str) -> Result<PolicySet> {
    let files: BTreeMap<String, PolicyFile> =
        serde_json::from_str(text).map_err(|e| Error::Data(format!("policy file: {e}")))?;
    if files.is_empty() {
        return Err(Error::Data("policy file holds no policies".into()));
    }
    let set = files
        .into_iter()
        .map(|(k, f)| Ok((k, bundle_from_file(f)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok(PolicySet(set))
}

pub fn write_policies(path: &Path, set: &PolicySet) -> Result<()> {
    write_atomic(path, policies_to_json(set)?.as_bytes())
}

pub fn read_policies(path: &Path) -> Result<PolicySet> {
    policies_from_json(&read_text(path)?).map_err(|e| match e {
        Error::Data(msg) => Error::Parse {
            path: path.to_owned(),
            line: 0,
            msg,
        },
        other => other,
    })
}

/// Fitted reward and its diagnostics, as written by the IRL step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSummary {
    pub params: RewardParams,
    pub reward_scale: f64,
    pub iterations: usize,
    pub converged: bool,
    pub final_loss: f64,
    pub train_metrics: RankingMetrics,
    pub loss_history: Vec<f64>,
}

impl FitSummary {
    pub fn new(fit: &FitResult, train_metrics: RankingMetrics) -> Self {
        Self {
            params: fit.params,
            reward_scale: fit.reward_scale,
            iterations: fit.iterations,
            converged: fit.converged,
            final_loss: fit.final_loss(),
            train_metrics,
            loss_history: fit.loss_history.clone(),
        }
    }
}

pub fn write_fit(path: &Path, summary: &FitSummary) -> Result<()> {
    let text = toml::to_string(summary).map_err(|e| Error::Data(format!("fit encoding: {e}")))?;
    write_atomic(path, text.as_bytes())
}

pub fn read_fit(path: &Path) -> Result<FitSummary> {
    let summary: FitSummary = toml::from_str(&read_text(path)?).map_err(|e| Error::Parse {
        path: path.to_owned(),
        line: 0,
        msg: e.to_string(),
    })?;
    summary.params.validate()?;
    Ok(summary)
}

/// Per-iteration loss and parameters, one row per accepted step.
pub fn write_fit_trace(path: &Path, fit: &FitResult) -> Result<()> {
    let header = ["iteration", "loss", "rho", "eta", "lam", "omega"].map(String::from);
    let rows = fit
        .loss_history
        .iter()
        .zip(&fit.param_history)
        .enumerate()
        .map(|(i, (l, p))| {
            let mut r = vec![i.to_string(), fmt(*l)];
            r.extend(p.to_array().iter().map(|v| fmt(*v)));
            r
        });
    write_atomic(path, &csv_bytes(&header, rows)?)
}
