//! Aggregation of the cluster into a state-of-charge histogram and the
//! state-time grid: each control period the devices are binned by their
//! normalized dead-band position, and the last `n_his` histograms are stacked
//! into the matrix the convolutional network consumes.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::TclParameters;

/// `n_bin` equidistant support points spanning the attainable state of
/// charge `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportPoints {
    points: Vec<f64>,
}

impl SupportPoints {
    pub fn new(n_bin: usize) -> Result<Self> {
        if n_bin < 2 {
            return Err(Error::InvalidArgument(
                "support needs at least two points".into(),
            ));
        }
        let points = (0..n_bin)
            .map(|j| j as f64 / (n_bin - 1) as f64)
            .collect();
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }
}

/// Histogram of the cluster over the support points; counts sum to the
/// cluster size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinVector {
    pub counts: Vec<u32>,
}

impl BinVector {
    pub fn total(&self) -> u32 {
        self.counts.iter().sum()
    }
}

/// `n_bin x n_his` stack of histograms. Column `j` holds the histogram
/// observed `n_his - 1 - j` periods ago, so the newest column is last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateTimeGrid {
    n_bin: usize,
    n_his: usize,
    /// Row-major, rows = bins, columns = time.
    counts: Vec<u32>,
}

impl StateTimeGrid {
    /// Rebuilds a grid from row-major counts (rows = bins, columns = time).
    pub fn from_raw(n_bin: usize, n_his: usize, counts: Vec<u32>) -> Self {
        assert_eq!(counts.len(), n_bin * n_his, "grid size mismatch");
        Self {
            n_bin,
            n_his,
            counts,
        }
    }

    pub fn n_bin(&self) -> usize {
        self.n_bin
    }

    pub fn n_his(&self) -> usize {
        self.n_his
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn get(&self, bin: usize, t: usize) -> u32 {
        self.counts[bin * self.n_his + t]
    }

    /// Sum of one time column; equals the cluster size by construction.
    pub fn column_total(&self, t: usize) -> u32 {
        (0..self.n_bin).map(|b| self.get(b, t)).sum()
    }

    fn from_columns(columns: &[&BinVector]) -> Self {
        let n_his = columns.len();
        let n_bin = columns[0].counts.len();
        let mut counts = vec![0u32; n_bin * n_his];
        for (t, col) in columns.iter().enumerate() {
            debug_assert_eq!(col.counts.len(), n_bin);
            for b in 0..n_bin {
                counts[b * n_his + t] = col.counts[b];
            }
        }
        Self {
            n_bin,
            n_his,
            counts,
        }
    }
}

/// Normalized dead-band position of a device, clipped to `[0, 1]`.
pub fn soc(t_air: f64, params: &TclParameters) -> f64 {
    debug_assert!(params.t_max > params.t_min);
    ((t_air - params.t_min) / (params.t_max - params.t_min)).clamp(0.0, 1.0)
}

/// Bins every device into the largest support point not exceeding its state
/// of charge.
pub fn bin_cluster(
    t_airs: &[f64],
    params: &[TclParameters],
    support: &SupportPoints,
) -> BinVector {
    debug_assert_eq!(t_airs.len(), params.len());
    let mut counts = vec![0u32; support.len()];
    let pts = support.points();
    for (&t, p) in t_airs.iter().zip(params) {
        let s = soc(t, p);
        // Largest j with pts[j] <= s; pts[0] = 0 always qualifies.
        let j = match pts.binary_search_by(|v| v.partial_cmp(&s).unwrap()) {
            Ok(j) => j,
            Err(ins) => ins - 1,
        };
        counts[j] += 1;
    }
    BinVector { counts }
}

/// Sliding window of histograms producing the state-time grid. Before
/// `n_his` observations exist, the oldest available histogram is replicated
/// backward to fill the grid.
#[derive(Debug, Clone)]
pub struct HistoryRing {
    window: VecDeque<BinVector>,
    n_his: usize,
}

impl HistoryRing {
    pub fn new(n_his: usize) -> Result<Self> {
        if n_his == 0 {
            return Err(Error::InvalidArgument("n_his must be at least 1".into()));
        }
        Ok(Self {
            window: VecDeque::with_capacity(n_his),
            n_his,
        })
    }

    pub fn n_his(&self) -> usize {
        self.n_his
    }

    pub fn len(&self) -> usize {
        self.window.len()
    }

    pub fn is_empty(&self) -> bool {
        self.window.is_empty()
    }

    /// Appends a histogram, drops the oldest beyond `n_his`, and returns the
    /// current grid.
    pub fn push(&mut self, b: BinVector) -> StateTimeGrid {
        if self.window.len() == self.n_his {
            self.window.pop_front();
        }
        self.window.push_back(b);
        self.grid()
    }

    /// Current grid with cold-start replication of the oldest column.
    pub fn grid(&self) -> StateTimeGrid {
        assert!(!self.window.is_empty(), "grid requested before first push");
        let mut columns: Vec<&BinVector> = Vec::with_capacity(self.n_his);
        let missing = self.n_his - self.window.len();
        let oldest = self.window.front().unwrap();
        for _ in 0..missing {
            columns.push(oldest);
        }
        columns.extend(self.window.iter());
        StateTimeGrid::from_columns(&columns)
    }
}

/// Grid for the no-history ablation: the latest histogram copied `n_his`
/// times.
pub fn ablation_grid(b: &BinVector, n_his: usize) -> StateTimeGrid {
    debug_assert!(n_his >= 1);
    let columns: Vec<&BinVector> = (0..n_his).map(|_| b).collect();
    StateTimeGrid::from_columns(&columns)
}

/// The full MDP state: hour of day, state-time grid, outside temperature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedState {
    /// Hour of the day in `1..=steps_per_day`.
    pub hour: u32,
    pub grid: StateTimeGrid,
    pub t_out: f64,
}
