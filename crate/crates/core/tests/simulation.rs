//! Synthetic data generator and time-series model behavior.

mod support;

use alterego::market::{fit_forecaster, fit_sector, forecast, market_model_from_history, ArmaSpec};
use alterego::simgen::{generate_funds, generate_market_path, propagation_residual, SimConfig};
use alterego::trex::{average_ranks, pearson};
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use support::rng;

fn arma_series(c: f64, phi: f64, theta: f64, sd: f64, len: usize, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    let mut y = Vec::with_capacity(len);
    let (mut prev_y, mut prev_e) = (c / (1.0 - phi), 0.0);
    for _ in 0..len + 200 {
        let e = sd * r.sample::<f64, _>(StandardNormal);
        let v = c + phi * prev_y + e + theta * prev_e;
        y.push(v);
        prev_y = v;
        prev_e = e;
    }
    y.split_off(200)
}

#[test]
fn skill_orders_training_returns() {
    let mut total = 0.0;
    for seed in 1..=20 {
        let cfg = SimConfig {
            seed,
            ..SimConfig::default()
        };
        let path = generate_market_path(&cfg).unwrap();
        let funds = generate_funds(&cfg, &path).unwrap();
        let returns: Vec<f64> = funds
            .trajectories
            .iter()
            .map(|f| {
                let w = f.window(0, cfg.horizon).unwrap();
                alterego::reward::realized_total_return(&w).unwrap()
            })
            .collect();
        total += pearson(&average_ranks(&cfg.skill_levels), &average_ranks(&returns));
    }
    let mean = total / 20.0;
    assert!(mean >= 0.8, "mean rank correlation {mean}");
}

#[test]
fn generator_is_deterministic_and_seed_dependent() {
    let cfg = SimConfig::default();
    let a = generate_funds(&cfg, &generate_market_path(&cfg).unwrap()).unwrap();
    let b = generate_funds(&cfg, &generate_market_path(&cfg).unwrap()).unwrap();
    assert_eq!(a.trajectories, b.trajectories);
    let other = SimConfig {
        seed: cfg.seed + 1,
        ..cfg.clone()
    };
    let c = generate_funds(&other, &generate_market_path(&other).unwrap()).unwrap();
    assert_ne!(a.trajectories[0].holdings, c.trajectories[0].holdings);
}

#[test]
fn simulated_holdings_follow_trades_and_returns() {
    let cfg = SimConfig::default();
    let path = generate_market_path(&cfg).unwrap();
    let funds = generate_funds(&cfg, &path).unwrap();
    assert_eq!(funds.len(), cfg.n_funds);
    for f in &funds.trajectories {
        assert_eq!(propagation_residual(f, &path.returns).unwrap(), 0.0);
        assert_eq!(f.horizon(), cfg.total_horizon());
        assert!((f.value(0) - 1.0).abs() < 1e-12);
    }
}

#[test]
fn ma_coefficient_is_recovered() {
    let y = arma_series(0.01, 0.0, 0.4, 0.05, 5000, 21);
    let fit = fit_sector(&y, ArmaSpec { p: 0, q: 1 }).unwrap();
    assert!((fit.ma[0] - 0.4).abs() < 0.05, "{fit:?}");
    assert!((fit.intercept - 0.01).abs() < 0.005);
}

#[test]
fn arma_forecasts_revert_to_the_unconditional_mean() {
    let y = arma_series(0.004, 0.5, 0.3, 0.03, 3000, 22);
    let fit = fit_sector(&y, ArmaSpec { p: 1, q: 1 }).unwrap();
    assert!(
        (fit.ar[0] - 0.5).abs() < 0.08 && (fit.ma[0] - 0.3).abs() < 0.08,
        "{fit:?}"
    );
    let path = fit.forecast(200);
    assert!((path[199] - fit.mean()).abs() < 1e-10);
    assert!((fit.mean() - 0.008).abs() < 0.003);
}

#[test]
fn market_model_appends_one_forecast_row() {
    let cols: Vec<Vec<f64>> = (0..3).map(|k| arma_series(0.005, 0.3, 0.0, 0.04, 60, 30 + k)).collect();
    let hist = DMatrix::from_fn(60, 3, |t, k| cols[k][t]);
    let (model, fitted) = market_model_from_history(&hist, ArmaSpec { p: 1, q: 0 }, 0.1).unwrap();
    assert_eq!(model.horizon(), 60);
    let ahead = forecast(&fitted, 1);
    for k in 0..3 {
        assert_eq!(model.mean_returns[(60, k)], ahead[(0, k)]);
    }
    let refit = fit_forecaster(&hist, ArmaSpec { p: 1, q: 0 }).unwrap();
    assert_eq!(refit.fitted, fitted.fitted);
}
