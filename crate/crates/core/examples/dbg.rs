// Re-score a finished run offline: recompute the benchmark with the current
// code and analyze daily energy.
use flexq::benchmark::full_horizon_daily_costs;
use flexq::harness::{read_daily_metrics, ExperimentConfig};
use flexq::sim::{generate_outside_temperature, generate_prices, sample_cluster_from, GainProcess, TclState, PriceConfig, WeatherConfig};
use std::path::Path;

fn main() {
    let dir = std::env::args().nth(1).unwrap_or("/tmp/cal_seed1".into());
    let cfg = ExperimentConfig::from_path(Path::new(&dir).join("manifest.json").as_path()).unwrap();
    let daily = read_daily_metrics(Path::new(&dir)).unwrap();
    let params = sample_cluster_from(&cfg.cluster, cfg.n_devices, cfg.seed).unwrap();
    let prices = generate_prices(cfg.n_days, cfg.seed, &PriceConfig::default());
    let weather = generate_outside_temperature(cfg.n_days + 1, cfg.seed, &WeatherConfig::default());
    let gains = GainProcess::new(cfg.seed ^ 0x6761696e73, cfg.gain_std);
    let states = vec![TclState::new(cfg.init_t_air, cfg.init_t_mass); cfg.n_devices];
    let horizon = cfg.n_days * 24;
    let bench = full_horizon_daily_costs(&params, &states, &weather.outside[..horizon], &prices.values[..horizon], 1.0, cfg.substeps, &cfg.benchmark, &gains, 24).unwrap();
    // daily energy from power profile
    let mut r = csv::Reader::from_path(Path::new(&dir).join("power_profile.csv")).unwrap();
    let mut energy = vec![0.0f64; cfg.n_days];
    for rec in r.records() {
        let rec = rec.unwrap();
        let day: usize = rec[0].parse().unwrap();
        let power: f64 = rec[4].parse().unwrap();
        energy[day - 1] += power;
    }
    println!("day | rl_cost | rl_kwh | bench(interp) | scaled");
    let mut tail = Vec::new();
    for m in &daily {
        let s = bench[m.day - 1] / m.rl_cost;
        println!("{:>3} | {:>7.3} | {:>6.1} | {:>7.3} | {:>6.3}", m.day, m.rl_cost, energy[m.day-1], bench[m.day-1], s);
        if m.day > cfg.n_days - 5 { tail.push(s); }
    }
    println!("final-5-day mean scaled (interp bench): {:.3}", tail.iter().sum::<f64>() / tail.len() as f64);
    println!("bench total {:.2}  rl total {:.2}", bench.iter().sum::<f64>(), daily.iter().map(|m| m.rl_cost).sum::<f64>());
}
