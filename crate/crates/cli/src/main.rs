//! Command-line front end: closed-loop training runs, the oracle-only
//! benchmark, the backup-only decoherence demo and paired ablation studies.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use flexq::harness::{
    ablation_report, decoherence_demo, run_benchmark_oracle, run_experiment,
    write_ablation_report, write_decoherence_csv, write_manifest, DecoherenceConfig,
    ExperimentConfig,
};

#[derive(Parser)]
#[command(
    name = "flexq",
    about = "Model-free direct load control of a TCL cluster: simulation, batch RL training and optimal-cost benchmarks",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file (.toml, or a manifest.json from a previous run).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in profile used when no config file is given.
    #[arg(long, default_value = "desk", value_parser = ["desk", "paper"])]
    profile: String,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Suppress per-day progress on stderr.
    #[arg(long)]
    quiet: bool,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::from_path(path)
                .with_context(|| format!("loading {}", path.display()))?,
            None => match self.profile.as_str() {
                "paper" => ExperimentConfig::paper(1),
                _ => ExperimentConfig::desk(1),
            },
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Closed-loop learning experiment: daily policy refresh, exploration,
    /// per-day benchmark; emits CSV metrics and a reproducible manifest.
    Train {
        #[command(flatten)]
        common: ConfigArgs,
        /// Replace the state-time history with copies of the newest
        /// histogram (the no-history ablation arm).
        #[arg(long)]
        ablation: bool,
    },
    /// Backup-only de-phasing demo of a large identical-start cluster.
    Simulate {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        devices: usize,
        #[arg(long, default_value_t = 3)]
        days: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Histogram bins.
        #[arg(long, default_value_t = 28)]
        bins: usize,
    },
    /// Oracle-only chain: per-day perfect-information optimal cost with
    /// states carried between days.
    Benchmark {
        #[command(flatten)]
        common: ConfigArgs,
    },
    /// Paired runs with and without state-time history plus the
    /// cumulated-cost report and Welch t-test. Pass run directories to
    /// aggregate existing runs instead of launching new ones.
    Ablation {
        #[command(flatten)]
        common: ConfigArgs,
        /// Number of seed pairs to run.
        #[arg(long, default_value_t = 6)]
        pairs: usize,
        /// First seed of the pair sequence; pair i uses seed_base + i.
        #[arg(long, default_value_t = 1)]
        seed_base: u64,
        /// Tail window (days) for the cumulated cost; defaults to the
        /// config's tail_window_days.
        #[arg(long)]
        tail_days: Option<usize>,
        /// Existing run directories of the with-history arm (report only).
        #[arg(long, num_args = 1.., value_delimiter = ',')]
        with_history: Vec<PathBuf>,
        /// Existing run directories of the without-history arm (report only).
        #[arg(long, num_args = 1.., value_delimiter = ',')]
        without_history: Vec<PathBuf>,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train { common, ablation } => {
            let mut cfg = common.resolve()?;
            if ablation {
                cfg.ablation_copy_history = true;
            }
            let quiet = common.quiet;
            let mut progress = |m: &flexq::harness::DailyMetrics| {
                if !quiet {
                    eprintln!(
                        "day {:>3}: cost {:>9.3}  benchmark {:>9.3}  scaled {:>6.3}  eps {:>5.3}",
                        m.day, m.rl_cost, m.benchmark_cost, m.scaled_performance, m.epsilon
                    );
                }
            };
            let summary = run_experiment(&cfg, &common.out, Some(&mut progress))?;
            println!(
                "wrote {} days of metrics to {}",
                summary.daily.len(),
                summary.out_dir.display()
            );
            Ok(())
        }
        Command::Simulate {
            out,
            devices,
            days,
            seed,
            bins,
        } => {
            let cfg = DecoherenceConfig {
                n_devices: devices,
                days,
                seed,
                n_bin: bins,
                ..DecoherenceConfig::default()
            };
            std::fs::create_dir_all(&out)?;
            let rows = decoherence_demo(&cfg)?;
            write_decoherence_csv(&rows, &out.join("decoherence.csv"))?;
            let json = std::fs::File::create(out.join("manifest.json"))?;
            serde_json::to_writer_pretty(json, &cfg)?;
            println!("wrote {} periods to {}", rows.len(), out.display());
            Ok(())
        }
        Command::Benchmark { common } => {
            let cfg = common.resolve()?;
            let quiet = common.quiet;
            let mut progress = |day: usize, cost: f64| {
                if !quiet {
                    eprintln!("day {day:>3}: optimal cost {cost:.3}");
                }
            };
            let rows = run_benchmark_oracle(&cfg, &common.out, Some(&mut progress))?;
            let total: f64 = rows.iter().map(|(_, c)| c).sum();
            println!(
                "wrote {} days (total optimal cost {total:.3}) to {}",
                rows.len(),
                common.out.display()
            );
            Ok(())
        }
        Command::Ablation {
            common,
            pairs,
            seed_base,
            tail_days,
            with_history,
            without_history,
        } => {
            let cfg = common.resolve()?;
            let tail = tail_days.unwrap_or(cfg.tail_window_days);
            let (history_dirs, ablation_dirs) = if !with_history.is_empty()
                || !without_history.is_empty()
            {
                if with_history.len() < 2 || without_history.len() < 2 {
                    bail!("report mode needs at least two directories per arm");
                }
                (with_history, without_history)
            } else {
                if pairs < 2 {
                    bail!("need at least two pairs");
                }
                let mut history_dirs = Vec::new();
                let mut ablation_dirs = Vec::new();
                for i in 0..pairs {
                    let seed = seed_base + i as u64;
                    for (arm, dirs, ablation) in [
                        ("with_history", &mut history_dirs, false),
                        ("without_history", &mut ablation_dirs, true),
                    ] {
                        let mut run_cfg = cfg.clone();
                        run_cfg.seed = seed;
                        run_cfg.ablation_copy_history = ablation;
                        let dir = common.out.join(arm).join(format!("seed_{seed}"));
                        if !common.quiet {
                            eprintln!("running {arm} seed {seed}");
                        }
                        run_experiment(&run_cfg, &dir, None)?;
                        dirs.push(dir);
                    }
                }
                (history_dirs, ablation_dirs)
            };
            let report = ablation_report(&history_dirs, &ablation_dirs, tail)?;
            write_ablation_report(&report, &common.out)?;
            write_manifest(&cfg, &common.out.join("manifest.json"))?;
            println!(
                "mean normalized cost: with history {:.4}, without {:.4}",
                report.mean_normalized_history, report.mean_normalized_ablation
            );
            println!(
                "cost reduction {:.2}% (welch p = {:.4}, t = {:.3}, dof = {:.1})",
                report.cost_reduction_pct, report.welch.p_value, report.welch.t, report.welch.dof
            );
            Ok(())
        }
    }
}
