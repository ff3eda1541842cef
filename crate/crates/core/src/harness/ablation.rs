//! Paired comparison of runs with and without state-time history: cumulated
//! tail-window costs, normalization by the grand mean, and a Welch
//! two-sample t-test on the unnormalized costs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::experiment::read_daily_metrics;
use crate::error::{Error, Result};

/// Welch's unequal-variance t-test.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct WelchTTest {
    pub t: f64,
    pub dof: f64,
    /// Two-sided p-value.
    pub p_value: f64,
}

pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<WelchTTest> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InvalidArgument(
            "welch test needs at least two samples per arm".into(),
        ));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let var = |v: &[f64], m: f64| {
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
    };
    let (ma, mb) = (mean(a), mean(b));
    let (va, vb) = (var(a, ma), var(b, mb));
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let se2 = va / na + vb / nb;
    if se2 == 0.0 {
        // Degenerate arms with identical values.
        let p = if ma == mb { 1.0 } else { 0.0 };
        return Ok(WelchTTest {
            t: if ma == mb { 0.0 } else { f64::INFINITY },
            dof: na + nb - 2.0,
            p_value: p,
        });
    }
    let t = (ma - mb) / se2.sqrt();
    let dof = se2.powi(2)
        / ((va / na).powi(2) / (na - 1.0) + (vb / nb).powi(2) / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, dof)
        .map_err(|e| Error::InvalidArgument(format!("t distribution: {e}")))?;
    let p_value = 2.0 * (1.0 - dist.cdf(t.abs()));
    Ok(WelchTTest { t, dof, p_value })
}

/// Summary of a paired ablation study. Arm naming follows the study design:
/// `history` keeps the true state-time stack, `ablation` copies the newest
/// histogram over all columns.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub tail_window_days: usize,
    /// Cumulated tail-window cost per run.
    pub cost_history: Vec<f64>,
    pub cost_ablation: Vec<f64>,
    /// Same costs normalized by the grand mean over all runs.
    pub normalized_history: Vec<f64>,
    pub normalized_ablation: Vec<f64>,
    pub mean_normalized_history: f64,
    pub mean_normalized_ablation: f64,
    /// Percent cost reduction of keeping the history, relative to the
    /// ablated arm's mean.
    pub cost_reduction_pct: f64,
    pub welch: WelchTTest,
}

/// Cumulated cost over the last `tail_window_days` of one run directory.
pub fn tail_window_cost(run_dir: &Path, tail_window_days: usize) -> Result<f64> {
    let daily = read_daily_metrics(run_dir)?;
    if daily.len() < tail_window_days {
        return Err(Error::InvalidArgument(format!(
            "{}: run has {} days, tail window needs {}",
            run_dir.display(),
            daily.len(),
            tail_window_days
        )));
    }
    Ok(daily[daily.len() - tail_window_days..]
        .iter()
        .map(|m| m.rl_cost)
        .sum())
}

/// Builds the paired report from run directories of both arms.
pub fn ablation_report(
    history_dirs: &[PathBuf],
    ablation_dirs: &[PathBuf],
    tail_window_days: usize,
) -> Result<AblationReport> {
    if history_dirs.len() < 2 || ablation_dirs.len() < 2 {
        return Err(Error::InvalidArgument(
            "need at least two runs per arm".into(),
        ));
    }
    let cost_history = history_dirs
        .iter()
        .map(|d| tail_window_cost(d, tail_window_days))
        .collect::<Result<Vec<_>>>()?;
    let cost_ablation = ablation_dirs
        .iter()
        .map(|d| tail_window_cost(d, tail_window_days))
        .collect::<Result<Vec<_>>>()?;
    let grand_mean = (cost_history.iter().sum::<f64>() + cost_ablation.iter().sum::<f64>())
        / (cost_history.len() + cost_ablation.len()) as f64;
    if !(grand_mean > 0.0) {
        return Err(Error::InvalidArgument(
            "grand-mean cost must be positive".into(),
        ));
    }
    let normalize = |v: &[f64]| -> Vec<f64> { v.iter().map(|c| c / grand_mean).collect() };
    let normalized_history = normalize(&cost_history);
    let normalized_ablation = normalize(&cost_ablation);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mean_normalized_history = mean(&normalized_history);
    let mean_normalized_ablation = mean(&normalized_ablation);
    let welch = welch_t_test(&cost_ablation, &cost_history)?;
    Ok(AblationReport {
        tail_window_days,
        cost_reduction_pct: (1.0 - mean_normalized_history / mean_normalized_ablation) * 100.0,
        cost_history,
        cost_ablation,
        normalized_history,
        normalized_ablation,
        mean_normalized_history,
        mean_normalized_ablation,
        welch,
    })
}

/// Writes the report as JSON plus a per-run CSV table.
pub fn write_ablation_report(report: &AblationReport, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let json = std::fs::File::create(out_dir.join("ablation.json"))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(json), report)?;
    let mut w = csv::Writer::from_path(out_dir.join("ablation.csv"))?;
    w.write_record(["arm", "run", "tail_cost", "normalized"])?;
    for (i, (c, n)) in report
        .cost_ablation
        .iter()
        .zip(&report.normalized_ablation)
        .enumerate()
    {
        w.write_record(["without_history", &i.to_string(), &c.to_string(), &n.to_string()])?;
    }
    for (i, (c, n)) in report
        .cost_history
        .iter()
        .zip(&report.normalized_history)
        .enumerate()
    {
        w.write_record(["with_history", &i.to_string(), &c.to_string(), &n.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
