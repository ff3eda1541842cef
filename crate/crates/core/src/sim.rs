//! Cluster simulation: second-order thermal dynamics per device, the local
//! backup controller, stochastic parameter sampling and the exogenous
//! weather/price series.
//!
//! Each device follows a two-state model: the observable indoor air
//! temperature `T` and the hidden building-mass temperature `T_m`,
//!
//! ```text
//! dT/dt   = inv_ca (T_o - T) + inv_cm (T_m - T) + heat_gain * P * u + q
//! dT_m/dt = inv_cm (T - T_m)
//! ```
//!
//! integrated with explicit Euler at `dt / substeps`. The controller only
//! ever sees `T`; `T_m` stays internal to this module and the benchmark.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};

/// Physical constants of one device.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TclParameters {
    /// Thermal coupling to ambient, h^-1.
    pub inv_ca: f64,
    /// Thermal coupling to the building mass, h^-1.
    pub inv_cm: f64,
    /// Electrical power rating, kW.
    pub power_kw: f64,
    /// Lower comfort bound, degC.
    pub t_min: f64,
    /// Upper comfort bound, degC.
    pub t_max: f64,
    /// Temperature rise per unit power, degC h^-1 kW^-1.
    pub heat_gain: f64,
}

impl TclParameters {
    pub fn validate(&self) -> Result<()> {
        if !(self.inv_ca > 0.0 && self.inv_cm > 0.0 && self.power_kw > 0.0) {
            return Err(Error::InvalidArgument(
                "thermal couplings and power rating must be positive".into(),
            ));
        }
        if !(self.t_min < self.t_max) {
            return Err(Error::InvalidArgument(
                "comfort bounds must satisfy t_min < t_max".into(),
            ));
        }
        Ok(())
    }
}

/// Thermal state of one device. Only `t_air` is observable to the controller.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TclState {
    pub t_air: f64,
    pub t_mass: f64,
}

impl TclState {
    pub fn new(t_air: f64, t_mass: f64) -> Self {
        Self { t_air, t_mass }
    }
}

/// Sampling distribution for heterogeneous cluster parameters.
///
/// The second argument of each normal is a standard deviation. Draws are
/// redrawn until positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterDistribution {
    pub inv_ca_mean: f64,
    pub inv_ca_std: f64,
    pub inv_cm_mean: f64,
    pub inv_cm_std: f64,
    pub power_kw: f64,
    pub t_min: f64,
    pub t_max: f64,
    pub heat_gain: f64,
}

impl Default for ClusterDistribution {
    fn default() -> Self {
        Self {
            inv_ca_mean: 0.004,
            inv_ca_std: 0.0008,
            inv_cm_mean: 0.2,
            inv_cm_std: 0.004,
            power_kw: 0.5,
            t_min: 20.0,
            t_max: 22.0,
            heat_gain: 1.0,
        }
    }
}

impl ClusterDistribution {
    /// Parameters at the distribution mean (no sampling).
    pub fn mean_parameters(&self) -> TclParameters {
        TclParameters {
            inv_ca: self.inv_ca_mean,
            inv_cm: self.inv_cm_mean,
            power_kw: self.power_kw,
            t_min: self.t_min,
            t_max: self.t_max,
            heat_gain: self.heat_gain,
        }
    }
}

/// Draws a heterogeneous cluster with the default distribution.
pub fn sample_cluster(n: usize, seed: u64) -> Result<Vec<TclParameters>> {
    sample_cluster_from(&ClusterDistribution::default(), n, seed)
}

/// Draws `n` parameter sets; deterministic for a fixed seed.
pub fn sample_cluster_from(
    dist: &ClusterDistribution,
    n: usize,
    seed: u64,
) -> Result<Vec<TclParameters>> {
    if n == 0 {
        return Err(Error::EmptyCluster);
    }
    let inv_ca = Normal::new(dist.inv_ca_mean, dist.inv_ca_std)
        .map_err(|e| Error::InvalidArgument(format!("inv_ca distribution: {e}")))?;
    let inv_cm = Normal::new(dist.inv_cm_mean, dist.inv_cm_std)
        .map_err(|e| Error::InvalidArgument(format!("inv_cm distribution: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw_positive = |normal: &Normal<f64>, rng: &mut ChaCha8Rng| loop {
        let v = normal.sample(rng);
        if v > 0.0 {
            return v;
        }
    };
    let cluster = (0..n)
        .map(|_| TclParameters {
            inv_ca: draw_positive(&inv_ca, &mut rng),
            inv_cm: draw_positive(&inv_cm, &mut rng),
            power_kw: dist.power_kw,
            t_min: dist.t_min,
            t_max: dist.t_max,
            heat_gain: dist.heat_gain,
        })
        .collect::<Vec<_>>();
    for p in &cluster {
        p.validate()?;
    }
    Ok(cluster)
}

/// Device-local comfort guard. Maps a requested switch action to the one
/// physically executed: forced ON at or below `t_min`, passed through inside
/// the dead-band, forced OFF above `t_max`. The lower branch wins at
/// `t_air == t_min`.
pub fn backup_filter(t_air: f64, u: bool, params: &TclParameters) -> bool {
    if t_air <= params.t_min {
        true
    } else if t_air <= params.t_max {
        u
    } else {
        false
    }
}

/// Advances one device over one control period of `dt` hours with explicit
/// Euler at `dt / substeps`. The executed action, internal gain `q` and the
/// outside temperature are held constant within the period.
pub fn step_tcl(
    state: TclState,
    params: &TclParameters,
    u_phys: bool,
    t_out: f64,
    q: f64,
    dt: f64,
    substeps: usize,
) -> Result<TclState> {
    debug_assert!(dt > 0.0 && substeps >= 1);
    let h = dt / substeps as f64;
    let heating = if u_phys {
        params.heat_gain * params.power_kw
    } else {
        0.0
    };
    let mut t = state.t_air;
    let mut tm = state.t_mass;
    for _ in 0..substeps {
        let d_air = params.inv_ca * (t_out - t) + params.inv_cm * (tm - t) + heating + q;
        let d_mass = params.inv_cm * (t - tm);
        t += h * d_air;
        tm += h * d_mass;
    }
    if !(t.is_finite() && tm.is_finite()) {
        return Err(Error::NumericalBlowup {
            what: "device temperature",
        });
    }
    Ok(TclState::new(t, tm))
}

/// Outcome of stepping the whole cluster over one control period.
#[derive(Debug, Clone)]
pub struct ClusterStepOutcome {
    /// Action actually executed per device after the backup filter.
    pub u_phys: Vec<bool>,
    /// Electrical energy drawn by the cluster during the period, kWh.
    pub energy_kwh: f64,
}

/// Applies the backup filter and steps every device. `q` holds the internal
/// gain of each device for this period.
pub fn step_cluster(
    states: &mut [TclState],
    params: &[TclParameters],
    u_requested: &[bool],
    t_out: f64,
    dt: f64,
    substeps: usize,
    q: &[f64],
) -> Result<ClusterStepOutcome> {
    let n = states.len();
    if params.len() != n || u_requested.len() != n || q.len() != n {
        return Err(Error::LengthMismatch(format!(
            "states {} / params {} / u {} / q {}",
            n,
            params.len(),
            u_requested.len(),
            q.len()
        )));
    }
    let mut u_phys = Vec::with_capacity(n);
    let mut energy_kwh = 0.0;
    for i in 0..n {
        let u = backup_filter(states[i].t_air, u_requested[i], &params[i]);
        states[i] = step_tcl(states[i], &params[i], u, t_out, q[i], dt, substeps)?;
        if u {
            energy_kwh += dt * params[i].power_kw;
        }
        u_phys.push(u);
    }
    Ok(ClusterStepOutcome { u_phys, energy_kwh })
}

/// Electricity cost of one period: `dt * price * sum(u_phys * power)`.
pub fn stage_cost(u_phys: &[bool], params: &[TclParameters], price: f64, dt: f64) -> f64 {
    debug_assert_eq!(u_phys.len(), params.len());
    let power: f64 = u_phys
        .iter()
        .zip(params)
        .filter(|(&on, _)| on)
        .map(|(_, p)| p.power_kw)
        .sum();
    dt * price * power
}

/// Per-device internal heat gain, redrawn once per control period from
/// `N(0, std)`. Each (period, device) pair has its own stream derived from
/// the master seed, so the draw is independent of iteration order and can be
/// replayed exactly by the benchmark.
#[derive(Debug, Clone, Copy)]
pub struct GainProcess {
    seed: u64,
    std: f64,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

impl GainProcess {
    pub fn new(seed: u64, std: f64) -> Self {
        Self { seed, std }
    }

    /// Gain of one device for one control period, degC/h.
    pub fn sample(&self, period: usize, device: usize) -> f64 {
        if self.std == 0.0 {
            return 0.0;
        }
        let key = splitmix64(splitmix64(self.seed ^ (period as u64)) ^ (device as u64));
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        let z: f64 = rand_distr::StandardNormal.sample(&mut rng);
        z * self.std
    }

    pub fn sample_all(&self, period: usize, n: usize) -> Vec<f64> {
        (0..n).map(|i| self.sample(period, i)).collect()
    }
}

/// Outside temperature and its forecast, one value per control period.
#[derive(Debug, Clone, PartialEq)]
pub struct ExogenousSeries {
    pub outside: Vec<f64>,
    pub forecast: Vec<f64>,
    pub steps_per_day: usize,
}

impl ExogenousSeries {
    pub fn len(&self) -> usize {
        self.outside.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outside.is_empty()
    }
}

/// Synthetic weather: a diurnal sinusoid with slow drift and additive noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WeatherConfig {
    pub mean: f64,
    pub amplitude: f64,
    /// Added linearly per elapsed day.
    pub drift_per_day: f64,
    pub noise_std: f64,
    /// Std of the forecast error; zero means a perfect forecast.
    pub forecast_noise_std: f64,
    /// Hour of day at which the sinusoid peaks.
    pub peak_hour: f64,
    pub steps_per_day: usize,
}

impl Default for WeatherConfig {
    fn default() -> Self {
        Self {
            mean: 4.0,
            amplitude: 3.0,
            drift_per_day: 0.0,
            noise_std: 0.4,
            forecast_noise_std: 0.0,
            peak_hour: 14.0,
            steps_per_day: 24,
        }
    }
}

/// Generates `days` of outside temperature plus its forecast.
pub fn generate_outside_temperature(
    days: usize,
    seed: u64,
    cfg: &WeatherConfig,
) -> ExogenousSeries {
    debug_assert!(days >= 1);
    let spd = cfg.steps_per_day;
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0x57454154));
    let normal = |std: f64, rng: &mut ChaCha8Rng| -> f64 {
        if std == 0.0 {
            0.0
        } else {
            let z: f64 = rand_distr::StandardNormal.sample(rng);
            z * std
        }
    };
    let mut outside = Vec::with_capacity(days * spd);
    let mut forecast = Vec::with_capacity(days * spd);
    for k in 0..days * spd {
        let day = (k / spd) as f64;
        let hour = (k % spd) as f64;
        let phase = 2.0 * std::f64::consts::PI * (hour - cfg.peak_hour) / spd as f64;
        let base = cfg.mean + cfg.drift_per_day * day + cfg.amplitude * phase.cos();
        let t = base + normal(cfg.noise_std, &mut rng);
        outside.push(t);
        forecast.push(t + normal(cfg.forecast_noise_std, &mut rng));
    }
    ExogenousSeries {
        outside,
        forecast,
        steps_per_day: spd,
    }
}

/// Electricity price, one value per control period. Negative prices are
/// permitted; values are currency per kWh.
#[derive(Debug, Clone, PartialEq)]
pub struct PriceSeries {
    pub values: Vec<f64>,
    pub steps_per_day: usize,
}

impl PriceSeries {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn day(&self, day_index: usize) -> &[f64] {
        let s = day_index * self.steps_per_day;
        &self.values[s..s + self.steps_per_day]
    }
}

/// Synthetic day-ahead price: a base level with morning and evening peaks and
/// day-to-day noise, mimicking the double-peaked shape of spot markets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriceConfig {
    pub base: f64,
    pub morning_peak: f64,
    pub morning_hour: f64,
    pub evening_peak: f64,
    pub evening_hour: f64,
    /// Gaussian width of each peak, hours.
    pub peak_width: f64,
    /// Std of a per-day multiplicative level shift.
    pub day_noise_std: f64,
    /// Std of additive per-period noise.
    pub step_noise_std: f64,
    /// Prices are clipped from below at this floor.
    pub floor: f64,
    pub steps_per_day: usize,
}

impl Default for PriceConfig {
    fn default() -> Self {
        Self {
            base: 0.03,
            morning_peak: 0.05,
            morning_hour: 8.0,
            evening_peak: 0.09,
            evening_hour: 19.0,
            peak_width: 2.2,
            day_noise_std: 0.08,
            step_noise_std: 0.002,
            floor: 0.005,
            steps_per_day: 24,
        }
    }
}

/// Generates `days` of synthetic prices.
pub fn generate_prices(days: usize, seed: u64, cfg: &PriceConfig) -> PriceSeries {
    debug_assert!(days >= 1);
    let spd = cfg.steps_per_day;
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0x5052494345));
    let mut values = Vec::with_capacity(days * spd);
    for day in 0..days {
        let level: f64 = if cfg.day_noise_std == 0.0 {
            1.0
        } else {
            let z: f64 = rand_distr::StandardNormal.sample(&mut rng);
            (1.0 + z * cfg.day_noise_std).max(0.2)
        };
        for k in 0..spd {
            let h = k as f64;
            // Wrap hour distance so the evening peak decays smoothly across midnight.
            let dist = |center: f64| -> f64 {
                let d = (h - center).abs();
                d.min(spd as f64 - d)
            };
            let bump = |center: f64, height: f64| -> f64 {
                let d = dist(center);
                height * (-0.5 * (d / cfg.peak_width).powi(2)).exp()
            };
            let mut p = cfg.base
                + bump(cfg.morning_hour, cfg.morning_peak)
                + bump(cfg.evening_hour, cfg.evening_peak);
            p *= level;
            if cfg.step_noise_std > 0.0 {
                let z: f64 = rand_distr::StandardNormal.sample(&mut rng);
                p += z * cfg.step_noise_std;
            }
            values.push(p.max(cfg.floor));
        }
        let _ = day;
    }
    PriceSeries {
        values,
        steps_per_day: spd,
    }
}

/// Writes a price series as `day_index,hour,price` with 1-based hours.
pub fn write_price_csv(path: &Path, series: &PriceSeries) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["day_index", "hour", "price"])?;
    for (k, v) in series.values.iter().enumerate() {
        let day = k / series.steps_per_day;
        let hour = k % series.steps_per_day + 1;
        w.write_record([day.to_string(), hour.to_string(), v.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a price series written by [`write_price_csv`].
pub fn read_price_csv(path: &Path) -> Result<PriceSeries> {
    let mut r = csv::Reader::from_path(path)?;
    let mut values = Vec::new();
    let mut steps_per_day = 0usize;
    for record in r.records() {
        let record = record?;
        let day: usize = parse_field(&record, 0, "day_index")?;
        let hour: usize = parse_field(&record, 1, "hour")?;
        let price: f64 = parse_field(&record, 2, "price")?;
        if day == 0 {
            steps_per_day = steps_per_day.max(hour);
        }
        values.push(price);
    }
    if values.is_empty() || steps_per_day == 0 {
        return Err(Error::InvalidConfig(format!(
            "{}: empty price csv",
            path.display()
        )));
    }
    Ok(PriceSeries {
        values,
        steps_per_day,
    })
}

/// Writes a temperature series as `day_index,hour,outside_temp,forecast_temp`.
pub fn write_temperature_csv(path: &Path, series: &ExogenousSeries) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["day_index", "hour", "outside_temp", "forecast_temp"])?;
    for k in 0..series.len() {
        let day = k / series.steps_per_day;
        let hour = k % series.steps_per_day + 1;
        w.write_record([
            day.to_string(),
            hour.to_string(),
            series.outside[k].to_string(),
            series.forecast[k].to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a temperature series; a missing forecast column falls back to the
/// observed value (perfect forecast).
pub fn read_temperature_csv(path: &Path) -> Result<ExogenousSeries> {
    let mut r = csv::Reader::from_path(path)?;
    let mut outside = Vec::new();
    let mut forecast = Vec::new();
    let mut steps_per_day = 0usize;
    for record in r.records() {
        let record = record?;
        let day: usize = parse_field(&record, 0, "day_index")?;
        let hour: usize = parse_field(&record, 1, "hour")?;
        let t: f64 = parse_field(&record, 2, "outside_temp")?;
        let f: f64 = match record.get(3) {
            Some(s) if !s.is_empty() => s
                .parse()
                .map_err(|e| Error::InvalidConfig(format!("forecast_temp: {e}")))?,
            _ => t,
        };
        if day == 0 {
            steps_per_day = steps_per_day.max(hour);
        }
        outside.push(t);
        forecast.push(f);
    }
    if outside.is_empty() || steps_per_day == 0 {
        return Err(Error::InvalidConfig(format!(
            "{}: empty temperature csv",
            path.display()
        )));
    }
    Ok(ExogenousSeries {
        outside,
        forecast,
        steps_per_day,
    })
}

fn parse_field<T: std::str::FromStr>(
    record: &csv::StringRecord,
    idx: usize,
    name: &str,
) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    record
        .get(idx)
        .ok_or_else(|| Error::InvalidConfig(format!("missing column {name}")))?
        .parse()
        .map_err(|e| Error::InvalidConfig(format!("column {name}: {e}")))
}
