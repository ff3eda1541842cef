//! Experiment configuration: serde-backed, with desk and paper-scale
//! profiles. TOML is the config surface; the JSON manifest written next to
//! each run round-trips the fully resolved configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::benchmark::DpGridConfig;
use crate::error::{Error, Result};
use crate::neuralnet::QNetworkConfig;
use crate::sim::{ClusterDistribution, PriceConfig, WeatherConfig};

/// Where the price series comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum PriceSource {
    Synthetic(PriceConfig),
    File { path: PathBuf },
}

impl Default for PriceSource {
    fn default() -> Self {
        PriceSource::Synthetic(PriceConfig::default())
    }
}

/// Where the outside-temperature series comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum WeatherSource {
    Synthetic(WeatherConfig),
    File { path: PathBuf },
}

impl Default for WeatherSource {
    fn default() -> Self {
        WeatherSource::Synthetic(WeatherConfig::default())
    }
}

/// Network hyperparameters; the grid dimensions come from `n_bin`/`n_his`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkSettings {
    pub input_dense: bool,
    pub conv1_filters: usize,
    pub conv1_kernel: usize,
    pub conv2_filters: usize,
    pub conv2_kernel: usize,
    pub conv_hidden: usize,
    pub scalar_inputs: usize,
    pub scalar_hidden: usize,
    pub merge_hidden: usize,
    pub learning_rate: f64,
    pub rho: f64,
    pub epsilon: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for NetworkSettings {
    fn default() -> Self {
        let base = QNetworkConfig::default();
        Self {
            input_dense: base.input_dense,
            conv1_filters: base.conv1_filters,
            conv1_kernel: base.conv1_kernel,
            conv2_filters: base.conv2_filters,
            conv2_kernel: base.conv2_kernel,
            conv_hidden: base.conv_hidden,
            scalar_inputs: base.scalar_inputs,
            scalar_hidden: base.scalar_hidden,
            merge_hidden: base.merge_hidden,
            learning_rate: base.learning_rate,
            rho: base.rho,
            epsilon: base.epsilon,
            epochs: base.epochs,
            batch_size: base.batch_size,
        }
    }
}

impl NetworkSettings {
    pub fn to_net_config(self, n_bin: usize, n_his: usize) -> QNetworkConfig {
        QNetworkConfig {
            grid_h: n_bin,
            grid_w: n_his,
            input_dense: self.input_dense,
            conv1_filters: self.conv1_filters,
            conv1_kernel: self.conv1_kernel,
            conv2_filters: self.conv2_filters,
            conv2_kernel: self.conv2_kernel,
            conv_hidden: self.conv_hidden,
            scalar_inputs: self.scalar_inputs,
            scalar_hidden: self.scalar_hidden,
            merge_hidden: self.merge_hidden,
            learning_rate: self.learning_rate,
            rho: self.rho,
            epsilon: self.epsilon,
            epochs: self.epochs,
            batch_size: self.batch_size,
        }
    }
}

/// Full description of one closed-loop experiment. The default is the desk
/// profile; [`ExperimentConfig::paper`] scales it to the full scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub n_devices: usize,
    pub n_days: usize,
    /// Trailing days run fully greedy (exploration forced to zero).
    pub greedy_tail_days: usize,
    pub n_bin: usize,
    pub n_his: usize,
    pub action_levels: usize,
    pub seed: u64,
    pub steps_per_day: usize,
    pub dt_hours: f64,
    pub substeps: usize,
    pub init_t_air: f64,
    pub init_t_mass: f64,
    /// Std of the per-period internal heat gain, degC/h.
    pub gain_std: f64,
    /// FIFO cap on the experience buffer; unlimited when absent.
    pub buffer_cap: Option<usize>,
    /// Q-iteration sweeps per daily refresh.
    pub fqi_horizon: usize,
    pub exploration_exponent: f64,
    /// Replace the state-time history by copies of the newest histogram.
    pub ablation_copy_history: bool,
    /// Days of the trailing window used for cumulated-cost reports.
    pub tail_window_days: usize,
    /// Also export the experience buffer next to the metrics.
    pub save_buffer: bool,
    pub cluster: ClusterDistribution,
    pub price: PriceSource,
    pub weather: WeatherSource,
    pub network: NetworkSettings,
    pub benchmark: DpGridConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n_devices: 100,
            n_days: 40,
            greedy_tail_days: 8,
            n_bin: 28,
            n_his: 28,
            action_levels: 11,
            seed: 1,
            steps_per_day: 24,
            dt_hours: 1.0,
            substeps: 60,
            // Start with the thermal storage near empty so day-one costs are
            // not subsidized by pre-charged building mass.
            init_t_air: 20.25,
            init_t_mass: 20.25,
            gain_std: 0.01,
            buffer_cap: None,
            fqi_horizon: 24,
            exploration_exponent: 0.7,
            ablation_copy_history: false,
            tail_window_days: 30,
            save_buffer: false,
            cluster: ClusterDistribution::default(),
            price: PriceSource::default(),
            weather: WeatherSource::default(),
            network: NetworkSettings::default(),
            benchmark: DpGridConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Desk profile: finishes on a workstation in well under two hours.
    pub fn desk(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    /// The full-scale scenario: 400 devices over 80 days.
    pub fn paper(seed: u64) -> Self {
        Self {
            n_devices: 400,
            n_days: 80,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_devices == 0 {
            return Err(Error::InvalidConfig("n_devices must be positive".into()));
        }
        if self.n_days == 0 || self.greedy_tail_days >= self.n_days {
            return Err(Error::InvalidConfig(
                "need n_days > greedy_tail_days >= 0".into(),
            ));
        }
        if self.n_bin < 2 || self.n_his < 1 {
            return Err(Error::InvalidConfig(
                "need n_bin >= 2 and n_his >= 1".into(),
            ));
        }
        if self.action_levels < 2 {
            return Err(Error::InvalidConfig(
                "need at least two action levels".into(),
            ));
        }
        if self.steps_per_day == 0 || self.dt_hours <= 0.0 || self.substeps == 0 {
            return Err(Error::InvalidConfig(
                "steps_per_day, dt_hours and substeps must be positive".into(),
            ));
        }
        if self.tail_window_days == 0 || self.tail_window_days > self.n_days {
            return Err(Error::InvalidConfig(format!(
                "tail_window_days must lie in 1..={}",
                self.n_days
            )));
        }
        if !(self.exploration_exponent > 0.0) {
            return Err(Error::InvalidConfig(
                "exploration_exponent must be positive".into(),
            ));
        }
        self.network
            .to_net_config(self.n_bin, self.n_his)
            .validate()?;
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config from `.toml`, or from a `.json` manifest written by a
    /// previous run (bare JSON configs are accepted too).
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::File {
            path: path.to_owned(),
            source: e,
        })?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => {
                let cfg = if let Ok(manifest) =
                    serde_json::from_str::<super::experiment::Manifest>(&text)
                {
                    manifest.config
                } else {
                    serde_json::from_str::<Self>(&text)?
                };
                cfg.validate()?;
                Ok(cfg)
            }
            _ => Self::from_toml_str(&text),
        }
    }
}
