use std::path::{Path, PathBuf};
use std::process::ExitCode;

use alterego::io::{read_fit, read_policies};
use alterego::pipeline::{
    self, create_dir, load_dataset, market_models, run_backtest, run_irl, run_replay, run_rl, write_dataset, write_irl,
    write_report, write_rl, Windows,
};
use alterego::{PipelineConfig, Result};
use clap::{Args, Parser, Subcommand};

/// Reward inference from ranked fund trajectories and sector-allocation
/// policies built on the inferred reward.
#[derive(Debug, Parser)]
#[command(name = "alterego", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory that receives all outputs.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Seed of the synthetic generator, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Also write SVG charts beside the CSV files.
    #[arg(long, global = true)]
    plots: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the synthetic dataset (or the ingested one) to <out>/data.
    Generate,
    /// Fit the reward on the training window; writes <out>/irl.
    Irl,
    /// Solve policies for a fitted reward; writes <out>/rl.
    Rl {
        /// Fit file from the irl command [default: <out>/irl/fit.toml].
        #[arg(long)]
        fit: Option<PathBuf>,
    },
    /// Roll policies forward on realized returns; writes <out>/backtest.
    Backtest {
        /// Policy files [default: every policy_*.json in <out>/rl].
        #[arg(long, conflicts_with = "replay")]
        policy: Vec<PathBuf>,
        /// Replay every fund's own trades instead of a policy.
        #[arg(long)]
        replay: bool,
    },
    /// Run every stage end to end.
    Pipeline,
}

fn load_config(common: &Common) -> Result<PipelineConfig> {
    let mut cfg = match &common.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.simgen.seed = s;
    }
    cfg.output.plots |= common.plots;
    cfg.validate()?;
    Ok(cfg)
}

fn policy_files(rl_dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(rl_dir).map_err(|e| alterego::Error::io(rl_dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| alterego::Error::io(rl_dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if name.starts_with("policy_") && name.ends_with(".json") {
            files.push(path);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(alterego::Error::Config(format!(
            "no policy_*.json in {}; run the rl command or pass --policy",
            rl_dir.display()
        )));
    }
    Ok(files)
}

fn window_name(policy: &Path) -> String {
    let stem = policy.file_stem().and_then(|s| s.to_str()).unwrap_or("policy");
    stem.strip_prefix("policy_").unwrap_or(stem).to_owned()
}

fn execute(cli: &Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    let out = &cli.common.out_dir;
    let plots = cfg.output.plots;
    match &cli.command {
        Command::Generate => {
            let ds = load_dataset(&cfg)?;
            let dir = out.join("data");
            create_dir(&dir)?;
            write_dataset(&dir, &ds)
        }
        Command::Irl => {
            let ds = load_dataset(&cfg)?;
            let win = Windows::resolve(&cfg, &ds)?;
            let markets = market_models(&cfg, &ds, &win)?;
            let train = ds.demos(win.train_start, win.train_horizon)?;
            let test = (win.test_horizon > 0)
                .then(|| ds.demos(win.train_end(), win.test_horizon))
                .transpose()?;
            let irl = run_irl(&cfg, &train, test.as_ref(), &markets)?;
            let mut rankings = vec![("train", &train, &markets.train)];
            if let (Some(d), Some(m)) = (&test, &markets.test) {
                rankings.push(("test", d, m));
            }
            write_irl(&out.join("irl"), &irl, &rankings, plots)
        }
        Command::Rl { fit } => {
            let fit_path = fit.clone().unwrap_or_else(|| out.join("irl").join("fit.toml"));
            let params = read_fit(&fit_path)?.params;
            let ds = load_dataset(&cfg)?;
            let win = Windows::resolve(&cfg, &ds)?;
            let markets = market_models(&cfg, &ds, &win)?;
            let train = ds.demos(win.train_start, win.train_horizon)?;
            let rl = run_rl(&cfg, &params, &train, &markets, &win)?;
            write_rl(&out.join("rl"), &rl)
        }
        Command::Backtest { policy, replay } => {
            let ds = load_dataset(&cfg)?;
            let dir = out.join("backtest");
            create_dir(&dir)?;
            if *replay {
                let win = Windows::resolve(&cfg, &ds)?;
                let r = run_replay(&ds, win.train_start, win.train_horizon, "replay train")?;
                write_report(&dir, "replay_train", &r, plots)?;
                if win.test_horizon > 0 {
                    let r = run_replay(&ds, win.train_end(), win.test_horizon, "replay test")?;
                    write_report(&dir, "replay_test", &r, plots)?;
                }
                return Ok(());
            }
            let files = if policy.is_empty() {
                policy_files(&out.join("rl"))?
            } else {
                policy.clone()
            };
            for f in &files {
                let name = window_name(f);
                let report = run_backtest(&ds, &read_policies(f)?, &name)?;
                write_report(&dir, &name, &report, plots)?;
            }
            Ok(())
        }
        Command::Pipeline => {
            let outcome = pipeline::run(&cfg)?;
            pipeline::write_outputs(out, &cfg, &outcome)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.category().exit_code() as u8)
        }
    }
}
