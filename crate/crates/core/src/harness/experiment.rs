//! Multi-day closed-loop experiment: daily policy refresh via fitted
//! Q-iteration, epsilon-greedy interaction, per-day benchmark replay, and
//! CSV/JSON emission of everything a plotting pipeline needs.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, PriceSource, WeatherSource};
use crate::benchmark::{full_horizon_daily_costs, scaled_performance};
use crate::error::{Error, Result};
use crate::fqi::{
    exploration_probability_with, fitted_q_iteration, run_day, ActionSet, ClusterEnv,
    ExperienceBuffer, FqiOptions, HistoryMode,
};
use crate::neuralnet::{InputEncoder, QNetwork};
use crate::sim::{
    generate_outside_temperature, generate_prices, read_price_csv, read_temperature_csv,
    sample_cluster_from, ExogenousSeries, GainProcess, PriceSeries, TclState,
};

pub const MANIFEST_VERSION: u32 = 1;

const SALT_GAINS: u64 = 0x6761696e73;
const SALT_NET: u64 = 0x6e6574;
const SALT_ACTIONS: u64 = 0x616374;
const SALT_TRAIN: u64 = 0x747261696e;

/// Written next to every run; reloading it reproduces the run byte for byte.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: ExperimentConfig,
}

/// One row of `daily_metrics.csv`.
#[derive(Debug, Clone)]
pub struct DailyMetrics {
    pub day: usize,
    pub rl_cost: f64,
    pub benchmark_cost: f64,
    pub scaled_performance: f64,
    pub epsilon: f64,
    pub mean_outside_temp: f64,
    pub train_mse: f64,
}

/// In-memory result of a run; everything is also on disk in `out_dir`.
#[derive(Debug)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub daily: Vec<DailyMetrics>,
}

fn resolve_prices(cfg: &ExperimentConfig) -> Result<PriceSeries> {
    let needed = cfg.n_days * cfg.steps_per_day;
    let series = match &cfg.price {
        PriceSource::Synthetic(p) => {
            let mut p = *p;
            p.steps_per_day = cfg.steps_per_day;
            generate_prices(cfg.n_days, cfg.seed, &p)
        }
        PriceSource::File { path } => read_price_csv(path)?,
    };
    if series.len() < needed || series.steps_per_day != cfg.steps_per_day {
        return Err(Error::InvalidConfig(format!(
            "price series: need {} periods of {} per day, got {} of {}",
            needed,
            cfg.steps_per_day,
            series.len(),
            series.steps_per_day
        )));
    }
    Ok(series)
}

fn resolve_weather(cfg: &ExperimentConfig) -> Result<ExogenousSeries> {
    // One extra period so the final successor state can be observed.
    let needed = cfg.n_days * cfg.steps_per_day + 1;
    let series = match &cfg.weather {
        WeatherSource::Synthetic(w) => {
            let mut w = *w;
            w.steps_per_day = cfg.steps_per_day;
            generate_outside_temperature(cfg.n_days + 1, cfg.seed, &w)
        }
        WeatherSource::File { path } => read_temperature_csv(path)?,
    };
    if series.len() < needed || series.steps_per_day != cfg.steps_per_day {
        return Err(Error::InvalidConfig(format!(
            "weather series: need at least {} periods of {} per day, got {} of {}",
            needed,
            cfg.steps_per_day,
            series.len(),
            series.steps_per_day
        )));
    }
    Ok(series)
}

/// Runs the full closed-loop experiment and writes the run directory:
/// `manifest.json`, `daily_metrics.csv`, `power_profile.csv`,
/// `benchmark.csv`, `net.json` and (opt-in) `buffer.csv`. The optional
/// callback sees each day's metrics as they are produced.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    mut progress: Option<&mut dyn FnMut(&DailyMetrics)>,
) -> Result<RunSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    write_manifest(cfg, &out_dir.join("manifest.json"))?;

    let prices = resolve_prices(cfg)?;
    let weather = resolve_weather(cfg)?;
    let params = sample_cluster_from(&cfg.cluster, cfg.n_devices, cfg.seed)?;
    let gains = GainProcess::new(cfg.seed ^ SALT_GAINS, cfg.gain_std);
    let mode = if cfg.ablation_copy_history {
        HistoryMode::CopyLast
    } else {
        HistoryMode::Full
    };
    let mut env = ClusterEnv::new(
        params.clone(),
        TclState::new(cfg.init_t_air, cfg.init_t_mass),
        cfg.n_bin,
        cfg.n_his,
        gains,
        cfg.dt_hours,
        cfg.substeps,
        cfg.steps_per_day,
        mode,
    )?;
    let total_power = env.total_power_kw();
    let actions = ActionSet::equidistant(cfg.action_levels, total_power)?;
    let mut encoder = InputEncoder::new(cfg.n_devices, total_power);
    encoder.steps_per_day = cfg.steps_per_day as u32;
    let mut net = QNetwork::new(
        cfg.network.to_net_config(cfg.n_bin, cfg.n_his),
        cfg.seed ^ SALT_NET,
    )?;
    let mut buffer = ExperienceBuffer::new(
        params.iter().map(|p| p.power_kw).collect(),
        cfg.buffer_cap,
    );
    let mut action_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SALT_ACTIONS);

    let steps = cfg.steps_per_day;
    // The benchmark world plans once over the whole horizon with perfect
    // information, then executes under the learner's noise realization; its
    // per-day slices describe a sustained optimal trajectory.
    let horizon = cfg.n_days * steps;
    let bench_daily = full_horizon_daily_costs(
        env.params(),
        env.states(),
        &weather.outside[..horizon],
        &prices.values[..horizon],
        cfg.dt_hours,
        cfg.substeps,
        &cfg.benchmark,
        &gains,
        steps,
    )?;
    let mut daily = Vec::with_capacity(cfg.n_days);
    let mut profile_rows: Vec<(usize, u32, f64, f64, f64)> = Vec::new();
    for day in 1..=cfg.n_days {
        let start = (day - 1) * steps;
        let day_prices = &prices.values[start..start + steps];
        let day_forecast = &weather.forecast[start..start + steps];
        let day_outside = &weather.outside[start..=start + steps];

        // Refresh the policy for the coming day on everything seen so far.
        let train_mse = if buffer.is_empty() {
            f64::NAN
        } else {
            fitted_q_iteration(
                &buffer,
                &mut net,
                &encoder,
                &actions,
                day_prices,
                day_forecast,
                cfg.dt_hours,
                &FqiOptions {
                    horizon: cfg.fqi_horizon,
                    train_seed: cfg.seed ^ SALT_TRAIN ^ (day as u64) << 32,
                },
            )?
        };

        let greedy = day > cfg.n_days - cfg.greedy_tail_days;
        let epsilon = if greedy {
            0.0
        } else {
            exploration_probability_with(day, cfg.exploration_exponent)
        };

        let record = run_day(
            &mut env,
            &net,
            &encoder,
            &actions,
            day_prices,
            day_outside,
            epsilon,
            &mut action_rng,
        )?;
        for p in &record.periods {
            profile_rows.push((day, p.hour, p.price, p.action_kw, p.power_kw));
        }
        buffer.extend(record.transitions);

        let benchmark_cost = bench_daily[day - 1];
        // A warm cluster can make a whole day free for the oracle (nothing
        // needs to heat); the ratio is undefined there and recorded as NaN.
        let scaled = if benchmark_cost > 0.0 && record.cost != 0.0 {
            scaled_performance(record.cost, benchmark_cost)?
        } else {
            f64::NAN
        };
        let metrics = DailyMetrics {
            day,
            rl_cost: record.cost,
            benchmark_cost,
            scaled_performance: scaled,
            epsilon,
            mean_outside_temp: day_outside[..steps].iter().sum::<f64>() / steps as f64,
            train_mse,
        };
        if let Some(callback) = progress.as_deref_mut() {
            callback(&metrics);
        }
        daily.push(metrics);
    }

    write_daily_metrics(&daily, &out_dir.join("daily_metrics.csv"))?;
    write_power_profile(&profile_rows, &out_dir.join("power_profile.csv"))?;
    write_benchmark_csv(&daily, &out_dir.join("benchmark.csv"))?;
    net.save(&out_dir.join("net.json"))?;
    if cfg.save_buffer {
        buffer.save_csv(&out_dir.join("buffer.csv"))?;
    }
    Ok(RunSummary {
        out_dir: out_dir.to_owned(),
        daily,
    })
}

/// Oracle-only run: no learner, no dispatch, no noise. Every device follows
/// its perfect-information optimal plan over the whole horizon; the cost is
/// reported per day. Writes `manifest.json` and `benchmark.csv`.
pub fn run_benchmark_oracle(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    mut progress: Option<&mut dyn FnMut(usize, f64)>,
) -> Result<Vec<(usize, f64)>> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    write_manifest(cfg, &out_dir.join("manifest.json"))?;
    let prices = resolve_prices(cfg)?;
    let weather = resolve_weather(cfg)?;
    let params = sample_cluster_from(&cfg.cluster, cfg.n_devices, cfg.seed)?;
    let states = vec![TclState::new(cfg.init_t_air, cfg.init_t_mass); cfg.n_devices];
    let horizon = cfg.n_days * cfg.steps_per_day;
    let daily = full_horizon_daily_costs(
        &params,
        &states,
        &weather.outside[..horizon],
        &prices.values[..horizon],
        cfg.dt_hours,
        cfg.substeps,
        &cfg.benchmark,
        &GainProcess::new(0, 0.0),
        cfg.steps_per_day,
    )?;
    let rows: Vec<(usize, f64)> = daily
        .into_iter()
        .enumerate()
        .map(|(i, c)| (i + 1, c))
        .collect();
    if let Some(callback) = progress.as_deref_mut() {
        for (day, cost) in &rows {
            callback(*day, *cost);
        }
    }
    let mut w = csv::Writer::from_path(out_dir.join("benchmark.csv"))?;
    w.write_record(["day", "benchmark_cost"])?;
    for (day, cost) in &rows {
        w.write_record([day.to_string(), cost.to_string()])?;
    }
    w.flush()?;
    Ok(rows)
}

pub fn write_manifest(cfg: &ExperimentConfig, path: &Path) -> Result<()> {
    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        config: cfg.clone(),
    };
    let file = std::fs::File::create(path).map_err(|e| Error::File {
        path: path.to_owned(),
        source: e,
    })?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), &manifest)?;
    Ok(())
}

fn write_daily_metrics(rows: &[DailyMetrics], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "day",
        "rl_cost",
        "benchmark_cost",
        "scaled_performance",
        "epsilon",
        "mean_outside_temp",
        "train_mse",
    ])?;
    for m in rows {
        w.write_record([
            m.day.to_string(),
            m.rl_cost.to_string(),
            m.benchmark_cost.to_string(),
            m.scaled_performance.to_string(),
            m.epsilon.to_string(),
            m.mean_outside_temp.to_string(),
            m.train_mse.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_power_profile(rows: &[(usize, u32, f64, f64, f64)], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["day", "hour", "price", "action_kw", "power_kw"])?;
    for (day, hour, price, action, power) in rows {
        w.write_record([
            day.to_string(),
            hour.to_string(),
            price.to_string(),
            action.to_string(),
            power.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_benchmark_csv(rows: &[DailyMetrics], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["day", "benchmark_cost"])?;
    for m in rows {
        w.write_record([m.day.to_string(), m.benchmark_cost.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads `daily_metrics.csv` back from a run directory.
pub fn read_daily_metrics(run_dir: &Path) -> Result<Vec<DailyMetrics>> {
    let path = run_dir.join("daily_metrics.csv");
    let mut r = csv::Reader::from_path(&path)?;
    let mut rows = Vec::new();
    for record in r.records() {
        let record = record?;
        let f = |i: usize| -> Result<f64> {
            record[i]
                .parse()
                .map_err(|e| Error::InvalidConfig(format!("{}: column {i}: {e}", path.display())))
        };
        rows.push(DailyMetrics {
            day: f(0)? as usize,
            rl_cost: f(1)?,
            benchmark_cost: f(2)?,
            scaled_performance: f(3)?,
            epsilon: f(4)?,
            mean_outside_temp: f(5)?,
            train_mse: f(6)?,
        });
    }
    Ok(rows)
}
