//! Experiment orchestration: configuration, the multi-day closed-loop run,
//! the state-time ablation report and the decoherence demo.

mod ablation;
mod config;
mod decoherence;
mod experiment;

pub use ablation::{
    ablation_report, tail_window_cost, welch_t_test, write_ablation_report, AblationReport,
    WelchTTest,
};
pub use config::{ExperimentConfig, NetworkSettings, PriceSource, WeatherSource};
pub use decoherence::{
    decoherence_demo, lag1_autocorrelation, write_decoherence_csv, DecoherenceConfig,
    DecoherenceRow,
};
pub use experiment::{
    read_daily_metrics, run_benchmark_oracle, run_experiment, write_manifest, DailyMetrics,
    Manifest, RunSummary, MANIFEST_VERSION,
};
