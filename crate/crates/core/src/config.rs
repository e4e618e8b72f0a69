//! Pipeline configuration, read from TOML with one table per stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glearner::GlearnerConfig;
use crate::market::{ArmaSpec, PriorCovariance};
use crate::simgen::SimConfig;
use crate::trex::TrexConfig;
use crate::types::YearMonth;

/// Input files. When `holdings` is unset the pipeline generates a synthetic
/// dataset from the `[simgen]` table instead.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    pub holdings: Option<PathBuf>,
    pub cashflows: Option<PathBuf>,
    pub benchmark: Option<PathBuf>,
    pub sector_returns: Option<PathBuf>,
    pub aliases: Option<PathBuf>,
}

impl DataPaths {
    pub fn is_synthetic(&self) -> bool {
        self.holdings.is_none()
    }

    /// Resolve relative paths against `base`.
    pub fn resolved(&self, base: &Path) -> Self {
        let fix = |p: &Option<PathBuf>| {
            p.as_ref()
                .map(|p| if p.is_relative() { base.join(p) } else { p.clone() })
        };
        Self {
            holdings: fix(&self.holdings),
            cashflows: fix(&self.cashflows),
            benchmark: fix(&self.benchmark),
            sector_returns: fix(&self.sector_returns),
            aliases: fix(&self.aliases),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.is_synthetic() {
            let stray = self.cashflows.is_some() || self.benchmark.is_some() || self.sector_returns.is_some();
            if stray {
                return Err(Error::Config("data paths given without data.holdings".into()));
            }
            return Ok(());
        }
        for (name, p) in [
            ("cashflows", &self.cashflows),
            ("benchmark", &self.benchmark),
            ("sector_returns", &self.sector_returns),
        ] {
            if p.is_none() {
                return Err(Error::Config(format!("data.{name} is required with data.holdings")));
            }
        }
        for p in [
            &self.holdings,
            &self.cashflows,
            &self.benchmark,
            &self.sector_returns,
            &self.aliases,
        ]
        .into_iter()
        .flatten()
        {
            if !p.is_file() {
                return Err(Error::Config(format!("input file {} does not exist", p.display())));
            }
        }
        Ok(())
    }
}

/// Training covers the states `train_start..=train_end`; testing continues
/// from `train_end` to `test_end`. Unset dates follow the synthetic
/// generator's windows.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Split {
    pub train_start: Option<YearMonth>,
    pub train_end: Option<YearMonth>,
    pub test_end: Option<YearMonth>,
}

impl Split {
    fn validate(&self) -> Result<()> {
        if let (Some(a), Some(b)) = (self.train_start, self.train_end) {
            if a.months_until(b) < 1 {
                return Err(Error::Config(format!("train_start {a} must precede train_end {b}")));
            }
        }
        if let (Some(b), Some(c)) = (self.train_end, self.test_end) {
            if b.months_until(c) < 1 {
                return Err(Error::Config(format!("train_end {b} must precede test_end {c}")));
            }
        }
        Ok(())
    }
}

/// Choice of the benchmark and flow paths a group-level policy is solved for.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupPaths {
    /// Average the funds' benchmark and cashflow paths.
    #[default]
    Average,
    /// Solve separately for each fund's own paths.
    PerFund,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarketConfig {
    pub arma: ArmaSpec,
    /// Weight on the diagonal target in the residual covariance.
    pub shrinkage: f64,
    pub prior_covariance: PriorCovariance,
    pub group_paths: GroupPaths,
}

impl Default for MarketConfig {
    fn default() -> Self {
        Self {
            arma: ArmaSpec::default(),
            shrinkage: 0.1,
            prior_covariance: PriorCovariance::Diagonal,
            group_paths: GroupPaths::Average,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub plots: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub data: DataPaths,
    pub split: Split,
    pub market: MarketConfig,
    pub trex: TrexConfig,
    pub glearner: GlearnerConfig,
    pub simgen: SimConfig,
    pub output: OutputConfig,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parse a config file, resolving data paths relative to its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.data = cfg.data.resolved(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.split.validate()?;
        self.trex.validate()?;
        self.glearner.validate()?;
        if self.data.is_synthetic() {
            self.simgen.validate()?;
        }
        if !(0.0..=1.0).contains(&self.market.shrinkage) {
            return Err(Error::Config(format!(
                "market.shrinkage must lie in [0, 1], got {}",
                self.market.shrinkage
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = PipelineConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(PipelineConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg = PipelineConfig::from_toml(
            "[trex]\nmax_iters = 50\n[glearner]\nbeta = 2.0\n[split]\ntrain_end = \"2019-01\"\n",
        )
        .unwrap();
        assert_eq!(cfg.trex.max_iters, 50);
        assert_eq!(cfg.trex.learning_rate, TrexConfig::default().learning_rate);
        assert_eq!(cfg.glearner.beta, Some(2.0));
        assert_eq!(cfg.split.train_end, Some(YearMonth::new(2019, 1).unwrap()));
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        let err = PipelineConfig::from_toml("[trex]\nmax_iter = 5\n").unwrap_err();
        assert_eq!(err.category(), crate::ErrorCategory::Config);
        let cfg = PipelineConfig::from_toml("[trex]\nlearning_rate = -1.0\n").unwrap();
        assert!(cfg.validate().is_err());
        let cfg = PipelineConfig::from_toml("[split]\ntrain_start = \"2019-05\"\ntrain_end = \"2019-01\"\n").unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn missing_input_files_are_reported() {
        let cfg = PipelineConfig::from_toml(
            "[data]\nholdings = \"/nonexistent/h.csv\"\ncashflows = \"c.csv\"\nbenchmark = \"b.csv\"\nsector_returns = \"r.csv\"\n",
        )
        .unwrap();
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("does not exist"), "{err}");
    }

    #[test]
    fn relative_paths_resolve_against_config_dir() {
        let d = DataPaths {
            holdings: Some("h.csv".into()),
            aliases: Some("/abs/a.csv".into()),
            ..DataPaths::default()
        };
        let r = d.resolved(Path::new("/cfg"));
        assert_eq!(r.holdings.unwrap(), PathBuf::from("/cfg/h.csv"));
        assert_eq!(r.aliases.unwrap(), PathBuf::from("/abs/a.csv"));
    }
}
