//! From-scratch value-function approximator: a two-stream network merging a
//! 2-d convolutional branch over the state-time grid with a dense branch over
//! the scalar inputs (hour, outside temperature, action), trained by analytic
//! backpropagation of the mean-squared error with RMSProp minibatches.
//!
//! Parameters live in one flat vector addressed through a [`Layout`] of
//! ranges, which keeps the optimizer, serialization and finite-difference
//! checks trivial while the forward/backward paths work on per-layer slices.

mod forward;
mod train;

pub use train::rmsprop_step;

use std::ops::Range;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::{AugmentedState, StateTimeGrid};
use crate::error::{Error, Result};

/// Architecture and training hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QNetworkConfig {
    /// Grid height: number of state-of-charge bins.
    pub grid_h: usize,
    /// Grid width: number of historical periods.
    pub grid_w: usize,
    /// Optional dense (h*w -> h*w) layer on the raw grid before the
    /// convolutions; off by default.
    pub input_dense: bool,
    pub conv1_filters: usize,
    pub conv1_kernel: usize,
    pub conv2_filters: usize,
    pub conv2_kernel: usize,
    /// Width of the dense layer collapsing the convolutional feature maps.
    pub conv_hidden: usize,
    /// Number of scalar inputs: 3 = (hour, outside temperature, action);
    /// 2 drops the outside temperature.
    pub scalar_inputs: usize,
    pub scalar_hidden: usize,
    /// Width of the two merged dense layers.
    pub merge_hidden: usize,
    pub learning_rate: f64,
    pub rho: f64,
    pub epsilon: f64,
    /// Epochs per regression call.
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for QNetworkConfig {
    fn default() -> Self {
        Self {
            grid_h: 28,
            grid_w: 28,
            input_dense: false,
            conv1_filters: 4,
            conv1_kernel: 7,
            conv2_filters: 8,
            conv2_kernel: 5,
            conv_hidden: 32,
            scalar_inputs: 3,
            scalar_hidden: 16,
            merge_hidden: 24,
            learning_rate: 0.001,
            rho: 0.9,
            epsilon: 1e-6,
            epochs: 10,
            batch_size: 16,
        }
    }
}

impl QNetworkConfig {
    /// Default architecture adapted to a given grid size.
    pub fn for_grid(n_bin: usize, n_his: usize) -> Self {
        Self {
            grid_h: n_bin,
            grid_w: n_his,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_h < self.conv1_kernel || self.grid_w < self.conv1_kernel {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} grid is smaller than the first {}x{} kernel",
                self.grid_h, self.grid_w, self.conv1_kernel, self.conv1_kernel
            )));
        }
        let h1 = self.grid_h - self.conv1_kernel + 1;
        let w1 = self.grid_w - self.conv1_kernel + 1;
        if h1 < self.conv2_kernel || w1 < self.conv2_kernel {
            return Err(Error::ShapeMismatch(format!(
                "{h1}x{w1} feature map is smaller than the second {}x{} kernel",
                self.conv2_kernel, self.conv2_kernel
            )));
        }
        if self.conv1_filters == 0
            || self.conv2_filters == 0
            || self.conv_hidden == 0
            || self.scalar_hidden == 0
            || self.merge_hidden == 0
        {
            return Err(Error::ShapeMismatch("zero-width layer".into()));
        }
        if !(self.scalar_inputs == 2 || self.scalar_inputs == 3) {
            return Err(Error::InvalidConfig(
                "scalar_inputs must be 2 or 3".into(),
            ));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidConfig(
                "batch_size and epochs must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.epsilon > 0.0 && (0.0..1.0).contains(&self.rho)) {
            return Err(Error::InvalidConfig("invalid optimizer constants".into()));
        }
        Ok(())
    }
}

/// Derived tensor shapes, fixed at construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Shapes {
    pub hw: usize,
    /// Conv1 output (filters, height, width).
    pub c1: (usize, usize, usize),
    /// Conv2 output (filters, height, width).
    pub c2: (usize, usize, usize),
    /// Rows of the first im2col matrix: in_channels * k1 * k1.
    pub k1_rows: usize,
    /// Rows of the second im2col matrix: conv1_filters * k2 * k2.
    pub k2_rows: usize,
    /// Flattened conv output length.
    pub flat: usize,
    /// Concatenated merge width.
    pub merge_in: usize,
}

impl Shapes {
    fn derive(cfg: &QNetworkConfig) -> Self {
        let h1 = cfg.grid_h - cfg.conv1_kernel + 1;
        let w1 = cfg.grid_w - cfg.conv1_kernel + 1;
        let h2 = h1 - cfg.conv2_kernel + 1;
        let w2 = w1 - cfg.conv2_kernel + 1;
        Shapes {
            hw: cfg.grid_h * cfg.grid_w,
            c1: (cfg.conv1_filters, h1, w1),
            c2: (cfg.conv2_filters, h2, w2),
            k1_rows: cfg.conv1_kernel * cfg.conv1_kernel,
            k2_rows: cfg.conv1_filters * cfg.conv2_kernel * cfg.conv2_kernel,
            flat: cfg.conv2_filters * h2 * w2,
            merge_in: cfg.conv_hidden + cfg.scalar_hidden,
        }
    }
}

/// Slices of the flat parameter vector, in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Layout {
    pub input_dense_w: Range<usize>,
    pub input_dense_b: Range<usize>,
    pub conv1_w: Range<usize>,
    pub conv1_b: Range<usize>,
    pub conv2_w: Range<usize>,
    pub conv2_b: Range<usize>,
    pub conv_dense_w: Range<usize>,
    pub conv_dense_b: Range<usize>,
    pub scalar_w: Range<usize>,
    pub scalar_b: Range<usize>,
    pub merge1_w: Range<usize>,
    pub merge1_b: Range<usize>,
    pub merge2_w: Range<usize>,
    pub merge2_b: Range<usize>,
    pub out_w: Range<usize>,
    pub out_b: Range<usize>,
    pub total: usize,
}

impl Layout {
    fn derive(cfg: &QNetworkConfig, shapes: &Shapes) -> Self {
        let mut cursor = 0usize;
        let mut take = |len: usize| {
            let r = cursor..cursor + len;
            cursor += len;
            r
        };
        let (input_dense_w, input_dense_b) = if cfg.input_dense {
            (take(shapes.hw * shapes.hw), take(shapes.hw))
        } else {
            (take(0), take(0))
        };
        let conv1_w = take(cfg.conv1_filters * shapes.k1_rows);
        let conv1_b = take(cfg.conv1_filters);
        let conv2_w = take(cfg.conv2_filters * shapes.k2_rows);
        let conv2_b = take(cfg.conv2_filters);
        let conv_dense_w = take(cfg.conv_hidden * shapes.flat);
        let conv_dense_b = take(cfg.conv_hidden);
        let scalar_w = take(cfg.scalar_hidden * cfg.scalar_inputs);
        let scalar_b = take(cfg.scalar_hidden);
        let merge1_w = take(cfg.merge_hidden * shapes.merge_in);
        let merge1_b = take(cfg.merge_hidden);
        let merge2_w = take(cfg.merge_hidden * cfg.merge_hidden);
        let merge2_b = take(cfg.merge_hidden);
        let out_w = take(cfg.merge_hidden);
        let out_b = take(1);
        Layout {
            input_dense_w,
            input_dense_b,
            conv1_w,
            conv1_b,
            conv2_w,
            conv2_b,
            conv_dense_w,
            conv_dense_b,
            scalar_w,
            scalar_b,
            merge1_w,
            merge1_b,
            merge2_w,
            merge2_b,
            out_w,
            out_b,
            total: cursor,
        }
    }
}

/// One training sample: a normalized grid plus the scalar inputs.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub grid: &'a [f64],
    pub scalars: &'a [f64],
}

/// The merged convolutional/dense Q-function approximator, including its
/// RMSProp accumulator so training warm-starts across regression calls.
#[derive(Debug, Clone)]
pub struct QNetwork {
    cfg: QNetworkConfig,
    shapes: Shapes,
    layout: Layout,
    params: Vec<f64>,
    rms: Vec<f64>,
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    config: QNetworkConfig,
    params: Vec<f64>,
    rms: Vec<f64>,
}

impl QNetwork {
    /// Builds a network with fan-scaled uniform initial weights
    /// (+-sqrt(6 / (fan_in + fan_out))) and zero biases.
    pub fn new(cfg: QNetworkConfig, seed: u64) -> Result<Self> {
        let mut net = Self::zeroed(cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = net.shapes;
        let l = net.layout.clone();
        let mut init = |range: Range<usize>, fan_in: usize, fan_out: usize, p: &mut Vec<f64>| {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in &mut p[range] {
                *v = rng.random_range(-limit..=limit);
            }
        };
        if cfg.input_dense {
            init(l.input_dense_w, shapes.hw, shapes.hw, &mut net.params);
        }
        let k1 = cfg.conv1_kernel * cfg.conv1_kernel;
        let k2 = cfg.conv2_kernel * cfg.conv2_kernel;
        init(l.conv1_w, k1, cfg.conv1_filters * k1, &mut net.params);
        init(
            l.conv2_w,
            cfg.conv1_filters * k2,
            cfg.conv2_filters * k2,
            &mut net.params,
        );
        init(l.conv_dense_w, shapes.flat, cfg.conv_hidden, &mut net.params);
        init(
            l.scalar_w,
            cfg.scalar_inputs,
            cfg.scalar_hidden,
            &mut net.params,
        );
        init(
            l.merge1_w,
            shapes.merge_in,
            cfg.merge_hidden,
            &mut net.params,
        );
        init(
            l.merge2_w,
            cfg.merge_hidden,
            cfg.merge_hidden,
            &mut net.params,
        );
        init(l.out_w, cfg.merge_hidden, 1, &mut net.params);
        Ok(net)
    }

    /// All-zero parameters; the output is identically zero.
    pub fn zeroed(cfg: QNetworkConfig) -> Result<Self> {
        cfg.validate()?;
        let shapes = Shapes::derive(&cfg);
        let layout = Layout::derive(&cfg, &shapes);
        let total = layout.total;
        Ok(Self {
            cfg,
            shapes,
            layout,
            params: vec![0.0; total],
            rms: vec![0.0; total],
        })
    }

    pub fn config(&self) -> &QNetworkConfig {
        &self.cfg
    }

    pub fn shapes(&self) -> &Shapes {
        &self.shapes
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    #[cfg(test)]
    pub(crate) fn layout(&self) -> &Layout {
        &self.layout
    }

    pub(crate) fn slice(&self, r: &Range<usize>) -> &[f64] {
        &self.params[r.clone()]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let checkpoint = Checkpoint {
            version: CHECKPOINT_VERSION,
            config: self.cfg,
            params: self.params.clone(),
            rms: self.rms.clone(),
        };
        let file = std::fs::File::create(path).map_err(|e| Error::File {
            path: path.to_owned(),
            source: e,
        })?;
        serde_json::to_writer(std::io::BufWriter::new(file), &checkpoint)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::File {
            path: path.to_owned(),
            source: e,
        })?;
        let checkpoint: Checkpoint = serde_json::from_reader(std::io::BufReader::new(file))?;
        if checkpoint.version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                found: checkpoint.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let mut net = Self::zeroed(checkpoint.config)?;
        if checkpoint.params.len() != net.params.len() || checkpoint.rms.len() != net.rms.len() {
            return Err(Error::ShapeMismatch(format!(
                "checkpoint holds {} parameters, architecture needs {}",
                checkpoint.params.len(),
                net.params.len()
            )));
        }
        net.params = checkpoint.params;
        net.rms = checkpoint.rms;
        Ok(net)
    }

    pub(crate) fn rms_mut(&mut self) -> (&mut Vec<f64>, &mut Vec<f64>) {
        (&mut self.params, &mut self.rms)
    }

    /// Scalar input vector in layer order for the configured width.
    pub fn compose_scalars(&self, hour_norm: f64, t_out_norm: f64, action_norm: f64) -> Vec<f64> {
        match self.cfg.scalar_inputs {
            3 => vec![hour_norm, t_out_norm, action_norm],
            _ => vec![hour_norm, action_norm],
        }
    }
}

/// Scales raw state components into the O(1) ranges the network trains on:
/// grid counts by the cluster size, the hour onto [0, 1], the outside
/// temperature around a reference, and the action by the cluster rating.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputEncoder {
    pub n_devices: usize,
    pub max_action_kw: f64,
    pub t_out_ref: f64,
    pub t_out_scale: f64,
    pub steps_per_day: u32,
}

impl InputEncoder {
    pub fn new(n_devices: usize, max_action_kw: f64) -> Self {
        Self {
            n_devices,
            max_action_kw,
            t_out_ref: 10.0,
            t_out_scale: 15.0,
            steps_per_day: 24,
        }
    }

    pub fn hour_norm(&self, hour: u32) -> f64 {
        debug_assert!((1..=self.steps_per_day).contains(&hour));
        (hour - 1) as f64 / (self.steps_per_day - 1) as f64
    }

    pub fn t_out_norm(&self, t_out: f64) -> f64 {
        (t_out - self.t_out_ref) / self.t_out_scale
    }

    pub fn action_norm(&self, action_kw: f64) -> f64 {
        action_kw / self.max_action_kw
    }

    pub fn encode_grid(&self, grid: &StateTimeGrid) -> Vec<f64> {
        let scale = 1.0 / self.n_devices as f64;
        grid.counts().iter().map(|&c| c as f64 * scale).collect()
    }

    pub fn encode_state(&self, state: &AugmentedState) -> EncodedState {
        EncodedState {
            grid: self.encode_grid(&state.grid),
            hour_norm: self.hour_norm(state.hour),
            t_out_norm: self.t_out_norm(state.t_out),
        }
    }
}

/// A state already scaled for the network; the action is appended per query.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedState {
    pub grid: Vec<f64>,
    pub hour_norm: f64,
    pub t_out_norm: f64,
}
