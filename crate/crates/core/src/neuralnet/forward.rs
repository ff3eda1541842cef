//! Single-sample inference paths. The convolutional branch depends only on
//! the grid, so [`QNetwork::conv_features`] can be computed once per state
//! and reused across the per-action sweep in [`QNetwork::min_q`].

use super::QNetwork;
use crate::linalg::{dot, gemm, im2col};

#[inline]
fn relu(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

/// out = W x + b for a row-major (out x in) weight matrix.
fn dense(w: &[f64], b: &[f64], x: &[f64], out: &mut Vec<f64>) {
    out.clear();
    let n_in = x.len();
    out.extend(
        b.iter()
            .enumerate()
            .map(|(o, &bias)| bias + dot(&w[o * n_in..(o + 1) * n_in], x)),
    );
}

impl QNetwork {
    /// Valid cross-correlation plus per-filter bias; the caller applies the
    /// activation.
    pub(crate) fn conv_layer(
        &self,
        input: &[f64],
        channels: usize,
        h: usize,
        w: usize,
        kernel: usize,
        weights: &[f64],
        bias: &[f64],
        col: &mut [f64],
        out: &mut [f64],
    ) {
        let out_hw = (h - kernel + 1) * (w - kernel + 1);
        let k_rows = channels * kernel * kernel;
        im2col(input, channels, h, w, kernel, col);
        gemm(
            bias.len(),
            k_rows,
            out_hw,
            1.0,
            weights,
            k_rows,
            1,
            col,
            out_hw,
            1,
            0.0,
            out,
        );
        for (f, &b) in bias.iter().enumerate() {
            for v in &mut out[f * out_hw..(f + 1) * out_hw] {
                *v += b;
            }
        }
    }

    /// Convolutional branch output (post-activation, `conv_hidden` wide).
    pub fn conv_features(&self, grid: &[f64]) -> Vec<f64> {
        let cfg = &self.cfg;
        let s = &self.shapes;
        assert_eq!(grid.len(), s.hw, "grid size mismatch");
        let l = self.layout.clone();

        let mut owned_a0;
        let mut source = grid;
        if cfg.input_dense {
            owned_a0 = Vec::new();
            dense(
                self.slice(&l.input_dense_w),
                self.slice(&l.input_dense_b),
                grid,
                &mut owned_a0,
            );
            relu(&mut owned_a0);
            source = &owned_a0;
        }

        let (f1, h1, w1) = s.c1;
        let (f2, h2, w2) = s.c2;
        let hw1 = h1 * w1;
        let hw2 = h2 * w2;

        let mut col1 = vec![0.0; s.k1_rows * hw1];
        let mut a1 = vec![0.0; f1 * hw1];
        self.conv_layer(
            source,
            1,
            cfg.grid_h,
            cfg.grid_w,
            cfg.conv1_kernel,
            self.slice(&l.conv1_w),
            self.slice(&l.conv1_b),
            &mut col1,
            &mut a1,
        );
        relu(&mut a1);

        let mut col2 = vec![0.0; s.k2_rows * hw2];
        let mut a2 = vec![0.0; f2 * hw2];
        self.conv_layer(
            &a1,
            f1,
            h1,
            w1,
            cfg.conv2_kernel,
            self.slice(&l.conv2_w),
            self.slice(&l.conv2_b),
            &mut col2,
            &mut a2,
        );
        relu(&mut a2);

        let mut features = Vec::new();
        dense(
            self.slice(&l.conv_dense_w),
            self.slice(&l.conv_dense_b),
            &a2,
            &mut features,
        );
        relu(&mut features);
        features
    }

    /// Q-value from precomputed convolutional features and raw scalar inputs.
    pub fn q_from_features(&self, conv_features: &[f64], scalars: &[f64]) -> f64 {
        let cfg = &self.cfg;
        assert_eq!(conv_features.len(), cfg.conv_hidden);
        assert_eq!(scalars.len(), cfg.scalar_inputs, "scalar width mismatch");
        let l = self.layout.clone();

        let mut h_sc = Vec::new();
        dense(
            self.slice(&l.scalar_w),
            self.slice(&l.scalar_b),
            scalars,
            &mut h_sc,
        );
        relu(&mut h_sc);

        let mut merged = Vec::with_capacity(self.shapes.merge_in);
        merged.extend_from_slice(conv_features);
        merged.extend_from_slice(&h_sc);

        let mut m1 = Vec::new();
        dense(
            self.slice(&l.merge1_w),
            self.slice(&l.merge1_b),
            &merged,
            &mut m1,
        );
        relu(&mut m1);

        let mut m2 = Vec::new();
        dense(
            self.slice(&l.merge2_w),
            self.slice(&l.merge2_b),
            &m1,
            &mut m2,
        );
        relu(&mut m2);

        self.params[l.out_b.start] + dot(self.slice(&l.out_w), &m2)
    }

    /// Full forward pass for one (grid, scalars) pair.
    pub fn forward(&self, grid: &[f64], scalars: &[f64]) -> f64 {
        let features = self.conv_features(grid);
        self.q_from_features(&features, scalars)
    }

    /// Evaluates every action and returns `(index, q)` of the minimum. Ties
    /// break toward the lowest index, i.e. the lowest-power action for an
    /// ascending action set.
    pub fn min_q(
        &self,
        grid: &[f64],
        hour_norm: f64,
        t_out_norm: f64,
        actions_norm: &[f64],
    ) -> (usize, f64) {
        assert!(!actions_norm.is_empty(), "empty action set");
        let features = self.conv_features(grid);
        let mut best = (0usize, f64::INFINITY);
        for (i, &a) in actions_norm.iter().enumerate() {
            let scalars = self.compose_scalars(hour_norm, t_out_norm, a);
            let q = self.q_from_features(&features, &scalars);
            if q < best.1 {
                best = (i, q);
            }
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::super::{QNetwork, QNetworkConfig};
    use approx::assert_relative_eq;

    fn small_cfg() -> QNetworkConfig {
        QNetworkConfig {
            grid_h: 8,
            grid_w: 8,
            conv1_kernel: 3,
            conv2_kernel: 3,
            ..QNetworkConfig::default()
        }
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = QNetwork::zeroed(small_cfg()).unwrap();
        let grid = vec![0.3; 64];
        assert_eq!(net.forward(&grid, &[0.5, 0.1, 0.7]), 0.0);
        let (idx, q) = net.min_q(&grid, 0.5, 0.1, &[0.0, 0.5, 1.0]);
        assert_eq!(idx, 0, "ties break toward the lowest-power action");
        assert_eq!(q, 0.0);
    }

    #[test]
    fn constant_bias_propagates_through_zero_weights() {
        let mut net = QNetwork::zeroed(small_cfg()).unwrap();
        // Setting only the output bias shifts every prediction by that bias.
        let l = net.layout().clone();
        net.params_mut()[l.out_b.start] = 1.25;
        let grid = vec![0.1; 64];
        assert_eq!(net.forward(&grid, &[0.0, 0.0, 0.0]), 1.25);
    }

    #[test]
    fn identity_kernel_crops_input() {
        // One 1x1-ish check: a single centered 1 in a 3x3 kernel reproduces
        // the centered crop of the input on the conv1 feature map.
        let cfg = small_cfg();
        let mut net = QNetwork::zeroed(cfg).unwrap();
        let l = net.layout().clone();
        net.params_mut()[l.conv1_w.start + 4] = 1.0; // center of first 3x3 filter
        let grid: Vec<f64> = (0..64).map(|i| i as f64).collect();
        let feats_in = {
            let (f1, h1, w1) = net.shapes().c1;
            let mut col = vec![0.0; net.shapes().k1_rows * h1 * w1];
            let mut out = vec![0.0; f1 * h1 * w1];
            net.conv_layer(
                &grid,
                1,
                8,
                8,
                3,
                net.slice(&l.conv1_w),
                net.slice(&l.conv1_b),
                &mut col,
                &mut out,
            );
            out
        };
        // Filter 0 output at (i, j) equals input at (i+1, j+1).
        for i in 0..6 {
            for j in 0..6 {
                assert_relative_eq!(feats_in[i * 6 + j], grid[(i + 1) * 8 + j + 1]);
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let net = QNetwork::new(small_cfg(), 3).unwrap();
        let grid: Vec<f64> = (0..64).map(|i| (i as f64 * 0.11).sin()).collect();
        let a = net.forward(&grid, &[0.2, -0.3, 0.9]);
        let b = net.forward(&grid, &[0.2, -0.3, 0.9]);
        assert_eq!(a, b);
        assert!(a.is_finite());
    }

    #[test]
    fn feature_split_matches_full_forward() {
        let net = QNetwork::new(small_cfg(), 9).unwrap();
        let grid: Vec<f64> = (0..64).map(|i| (i as f64 * 0.37).cos().abs()).collect();
        let feats = net.conv_features(&grid);
        for a in [0.0, 0.4, 1.0] {
            let scalars = net.compose_scalars(0.3, -0.1, a);
            assert_eq!(
                net.q_from_features(&feats, &scalars),
                net.forward(&grid, &scalars)
            );
        }
    }

    #[test]
    fn min_q_matches_exhaustive_scan() {
        let net = QNetwork::new(small_cfg(), 21).unwrap();
        let grid: Vec<f64> = (0..64).map(|i| ((i * 13 % 7) as f64) / 7.0).collect();
        let actions = [0.0, 0.25, 0.5, 0.75, 1.0];
        let (idx, q) = net.min_q(&grid, 0.6, 0.2, &actions);
        let qs: Vec<f64> = actions
            .iter()
            .map(|&a| net.forward(&grid, &net.compose_scalars(0.6, 0.2, a)))
            .collect();
        let best = qs.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(q, best);
        assert_eq!(qs[idx], best);
    }

    #[test]
    fn single_action_set_returns_it() {
        let net = QNetwork::new(small_cfg(), 2).unwrap();
        let grid = vec![0.5; 64];
        let (idx, _) = net.min_q(&grid, 0.0, 0.0, &[0.42]);
        assert_eq!(idx, 0);
    }
}
