//! Qualitative de-phasing demo: a large cluster started from identical
//! states under backup-only control. The initially synchronized limit cycles
//! drift apart as the heterogeneous parameters take effect, visible in the
//! per-period histogram and in the aggregate power losing its oscillation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::aggregation::{bin_cluster, BinVector, SupportPoints};
use crate::error::Result;
use crate::sim::{
    generate_outside_temperature, sample_cluster_from, step_cluster, ClusterDistribution,
    GainProcess, TclState, WeatherConfig,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoherenceConfig {
    pub n_devices: usize,
    pub days: usize,
    pub seed: u64,
    pub n_bin: usize,
    pub init_t_air: f64,
    pub init_t_mass: f64,
    pub dt_hours: f64,
    pub substeps: usize,
    pub gain_std: f64,
    pub cluster: ClusterDistribution,
    pub weather: WeatherConfig,
}

impl Default for DecoherenceConfig {
    fn default() -> Self {
        Self {
            n_devices: 1000,
            days: 3,
            seed: 1,
            n_bin: 28,
            init_t_air: 21.0,
            init_t_mass: 21.0,
            dt_hours: 1.0,
            substeps: 60,
            gain_std: 0.01,
            cluster: ClusterDistribution::default(),
            weather: WeatherConfig::default(),
        }
    }
}

/// One control period of the demo: temperatures and histogram are sampled at
/// the period start, the power is what the backup drew during the period.
#[derive(Debug, Clone)]
pub struct DecoherenceRow {
    pub period: usize,
    pub hour: u32,
    pub power_kw: f64,
    pub mean_t_air: f64,
    pub mean_t_mass: f64,
    pub histogram: BinVector,
}

/// Runs the cluster with a permanently-off request so only the backup
/// controller acts.
pub fn decoherence_demo(cfg: &DecoherenceConfig) -> Result<Vec<DecoherenceRow>> {
    let params = sample_cluster_from(&cfg.cluster, cfg.n_devices, cfg.seed)?;
    let support = SupportPoints::new(cfg.n_bin)?;
    let weather = generate_outside_temperature(cfg.days, cfg.seed, &cfg.weather);
    let gains = GainProcess::new(cfg.seed ^ 0x6465636f, cfg.gain_std);
    let mut states = vec![TclState::new(cfg.init_t_air, cfg.init_t_mass); cfg.n_devices];
    let steps = cfg.days * weather.steps_per_day;
    let off = vec![false; cfg.n_devices];
    let mut rows = Vec::with_capacity(steps);
    for period in 0..steps {
        let t_airs: Vec<f64> = states.iter().map(|s| s.t_air).collect();
        let histogram = bin_cluster(&t_airs, &params, &support);
        let mean_t_air = t_airs.iter().sum::<f64>() / cfg.n_devices as f64;
        let mean_t_mass =
            states.iter().map(|s| s.t_mass).sum::<f64>() / cfg.n_devices as f64;
        let q = gains.sample_all(period, cfg.n_devices);
        let out = step_cluster(
            &mut states,
            &params,
            &off,
            weather.outside[period],
            cfg.dt_hours,
            cfg.substeps,
            &q,
        )?;
        rows.push(DecoherenceRow {
            period,
            hour: (period % weather.steps_per_day) as u32 + 1,
            power_kw: out.energy_kwh / cfg.dt_hours,
            mean_t_air,
            mean_t_mass,
            histogram,
        });
    }
    Ok(rows)
}

pub fn write_decoherence_csv(rows: &[DecoherenceRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let n_bin = rows.first().map_or(0, |r| r.histogram.counts.len());
    let mut header = vec![
        "period".to_string(),
        "hour".to_string(),
        "power_kw".to_string(),
        "mean_t_air".to_string(),
        "mean_t_mass".to_string(),
    ];
    header.extend((0..n_bin).map(|b| format!("bin{b}")));
    w.write_record(&header)?;
    for r in rows {
        let mut record = vec![
            r.period.to_string(),
            r.hour.to_string(),
            r.power_kw.to_string(),
            r.mean_t_air.to_string(),
            r.mean_t_mass.to_string(),
        ];
        record.extend(r.histogram.counts.iter().map(|c| c.to_string()));
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

/// Lag-1 autocorrelation of a series.
pub fn lag1_autocorrelation(series: &[f64]) -> f64 {
    if series.len() < 3 {
        return 0.0;
    }
    let n = series.len();
    let mean = series.iter().sum::<f64>() / n as f64;
    let var: f64 = series.iter().map(|v| (v - mean).powi(2)).sum();
    if var == 0.0 {
        return 0.0;
    }
    let cov: f64 = series
        .windows(2)
        .map(|w| (w[0] - mean) * (w[1] - mean))
        .sum();
    cov / var
}
