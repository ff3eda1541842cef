//! Minibatch training: exact analytic gradients of the mean-squared error,
//! computed batch-at-a-time through GEMM on im2col buffers, and the RMSProp
//! update. The workspace is allocated once per call and reused across
//! batches.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{QNetwork, Sample};
use crate::error::{Error, Result};
use crate::linalg::{col2im_add, gemm, im2col};

/// One RMSProp update:
/// `ms <- rho * ms + (1 - rho) * g^2`, `p <- p - lr * g / (sqrt(ms) + eps)`.
pub fn rmsprop_step(params: &mut [f64], ms: &mut [f64], grads: &[f64], lr: f64, rho: f64, eps: f64) {
    debug_assert_eq!(params.len(), grads.len());
    debug_assert_eq!(params.len(), ms.len());
    for i in 0..params.len() {
        let g = grads[i];
        ms[i] = rho * ms[i] + (1.0 - rho) * g * g;
        params[i] -= lr * g / (ms[i].sqrt() + eps);
    }
}

/// Scratch buffers for one minibatch, sized for `capacity` samples.
struct Workspace {
    capacity: usize,
    xbuf: Vec<f64>,
    scal: Vec<f64>,
    a0: Vec<f64>,
    col1: Vec<f64>,
    a1: Vec<f64>,
    col2: Vec<f64>,
    a2: Vec<f64>,
    h_conv: Vec<f64>,
    h_sc: Vec<f64>,
    merged: Vec<f64>,
    m1: Vec<f64>,
    m2: Vec<f64>,
    y: Vec<f64>,
    dy: Vec<f64>,
    dm2: Vec<f64>,
    dm1: Vec<f64>,
    dmerged: Vec<f64>,
    dh_conv: Vec<f64>,
    dh_sc: Vec<f64>,
    da2: Vec<f64>,
    dcol2: Vec<f64>,
    da1: Vec<f64>,
    dcol1: Vec<f64>,
    da0: Vec<f64>,
    grads: Vec<f64>,
}

impl Workspace {
    fn new(net: &QNetwork, capacity: usize) -> Self {
        let cfg = net.config();
        let s = net.shapes();
        let (f1, h1, w1) = s.c1;
        let hw1 = h1 * w1;
        let (_, h2, w2) = s.c2;
        let hw2 = h2 * w2;
        let b = capacity;
        Self {
            capacity,
            xbuf: vec![0.0; b * s.hw],
            scal: vec![0.0; b * cfg.scalar_inputs],
            a0: vec![0.0; if cfg.input_dense { b * s.hw } else { 0 }],
            col1: vec![0.0; b * s.k1_rows * hw1],
            a1: vec![0.0; b * f1 * hw1],
            col2: vec![0.0; b * s.k2_rows * hw2],
            a2: vec![0.0; b * s.flat],
            h_conv: vec![0.0; b * cfg.conv_hidden],
            h_sc: vec![0.0; b * cfg.scalar_hidden],
            merged: vec![0.0; b * s.merge_in],
            m1: vec![0.0; b * cfg.merge_hidden],
            m2: vec![0.0; b * cfg.merge_hidden],
            y: vec![0.0; b],
            dy: vec![0.0; b],
            dm2: vec![0.0; b * cfg.merge_hidden],
            dm1: vec![0.0; b * cfg.merge_hidden],
            dmerged: vec![0.0; b * s.merge_in],
            dh_conv: vec![0.0; b * cfg.conv_hidden],
            dh_sc: vec![0.0; b * cfg.scalar_hidden],
            da2: vec![0.0; b * s.flat],
            dcol2: vec![0.0; s.k2_rows * hw2],
            da1: vec![0.0; f1 * hw1],
            dcol1: vec![0.0; if cfg.input_dense { s.k1_rows * hw1 } else { 0 }],
            da0: vec![0.0; if cfg.input_dense { b * s.hw } else { 0 }],
            grads: vec![0.0; net.num_params()],
        }
    }
}

/// Y (b x out) = relu_opt(X (b x in) W^T + bias), W row-major (out x in).
#[allow(clippy::too_many_arguments)]
fn dense_forward(
    x: &[f64],
    w: &[f64],
    bias: &[f64],
    y: &mut [f64],
    b: usize,
    n_in: usize,
    n_out: usize,
    relu: bool,
) {
    gemm(b, n_in, n_out, 1.0, x, n_in, 1, w, 1, n_in, 0.0, y);
    for r in 0..b {
        let row = &mut y[r * n_out..(r + 1) * n_out];
        for (v, &bb) in row.iter_mut().zip(bias) {
            *v += bb;
            if relu && *v < 0.0 {
                *v = 0.0;
            }
        }
    }
}

/// Gradients of one dense layer. `dy` is already activation-masked.
#[allow(clippy::too_many_arguments)]
fn dense_backward(
    dy: &[f64],
    x: &[f64],
    w: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    dx: Option<&mut [f64]>,
    b: usize,
    n_in: usize,
    n_out: usize,
) {
    // dW = dY^T X.
    gemm(n_out, b, n_in, 1.0, dy, 1, n_out, x, n_in, 1, 0.0, dw);
    for o in 0..n_out {
        let mut acc = 0.0;
        for r in 0..b {
            acc += dy[r * n_out + o];
        }
        db[o] = acc;
    }
    if let Some(dx) = dx {
        // dX = dY W.
        gemm(b, n_out, n_in, 1.0, dy, n_out, 1, w, n_in, 1, 0.0, dx);
    }
}

#[inline]
fn relu_mask(d: &mut [f64], activation: &[f64]) {
    for (g, &a) in d.iter_mut().zip(activation) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

impl QNetwork {
    /// Exact gradient of the batch mean-squared error and the batch MSE.
    pub fn batch_gradient(&self, samples: &[Sample<'_>], targets: &[f64]) -> (Vec<f64>, f64) {
        assert!(!samples.is_empty());
        assert_eq!(samples.len(), targets.len());
        let idx: Vec<usize> = (0..samples.len()).collect();
        let mut ws = Workspace::new(self, samples.len());
        let mse = self.gradient_into(samples, targets, &idx, &mut ws);
        (std::mem::take(&mut ws.grads), mse)
    }

    /// Computes gradients for the minibatch `idx` into `ws.grads`.
    fn gradient_into(
        &self,
        samples: &[Sample<'_>],
        targets: &[f64],
        idx: &[usize],
        ws: &mut Workspace,
    ) -> f64 {
        let b = idx.len();
        debug_assert!(b >= 1 && b <= ws.capacity);
        let cfg = &self.cfg;
        let s = self.shapes;
        let l = self.layout.clone();
        let (f1, h1, w1) = s.c1;
        let hw1 = h1 * w1;
        let (f2, h2, w2) = s.c2;
        let hw2 = h2 * w2;
        let (ch, sh, mh, mi) = (cfg.conv_hidden, cfg.scalar_hidden, cfg.merge_hidden, s.merge_in);
        let si = cfg.scalar_inputs;

        // ---- forward ----
        for (r, &i) in idx.iter().enumerate() {
            debug_assert_eq!(samples[i].grid.len(), s.hw);
            debug_assert_eq!(samples[i].scalars.len(), si);
            ws.xbuf[r * s.hw..(r + 1) * s.hw].copy_from_slice(samples[i].grid);
            ws.scal[r * si..(r + 1) * si].copy_from_slice(samples[i].scalars);
        }
        if cfg.input_dense {
            dense_forward(
                &ws.xbuf[..b * s.hw],
                self.slice(&l.input_dense_w),
                self.slice(&l.input_dense_b),
                &mut ws.a0[..b * s.hw],
                b,
                s.hw,
                s.hw,
                true,
            );
        }
        let conv_src = if cfg.input_dense { &ws.a0 } else { &ws.xbuf };
        for r in 0..b {
            let col = &mut ws.col1[r * s.k1_rows * hw1..(r + 1) * s.k1_rows * hw1];
            im2col(
                &conv_src[r * s.hw..(r + 1) * s.hw],
                1,
                cfg.grid_h,
                cfg.grid_w,
                cfg.conv1_kernel,
                col,
            );
            let out = &mut ws.a1[r * f1 * hw1..(r + 1) * f1 * hw1];
            gemm(
                f1,
                s.k1_rows,
                hw1,
                1.0,
                self.slice(&l.conv1_w),
                s.k1_rows,
                1,
                col,
                hw1,
                1,
                0.0,
                out,
            );
            let b1 = self.slice(&l.conv1_b);
            for f in 0..f1 {
                for v in &mut out[f * hw1..(f + 1) * hw1] {
                    *v += b1[f];
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }

            let col = &mut ws.col2[r * s.k2_rows * hw2..(r + 1) * s.k2_rows * hw2];
            im2col(
                &ws.a1[r * f1 * hw1..(r + 1) * f1 * hw1],
                f1,
                h1,
                w1,
                cfg.conv2_kernel,
                col,
            );
            let out = &mut ws.a2[r * s.flat..(r + 1) * s.flat];
            gemm(
                f2,
                s.k2_rows,
                hw2,
                1.0,
                self.slice(&l.conv2_w),
                s.k2_rows,
                1,
                col,
                hw2,
                1,
                0.0,
                out,
            );
            let b2 = self.slice(&l.conv2_b);
            for f in 0..f2 {
                for v in &mut out[f * hw2..(f + 1) * hw2] {
                    *v += b2[f];
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
        }
        dense_forward(
            &ws.a2[..b * s.flat],
            self.slice(&l.conv_dense_w),
            self.slice(&l.conv_dense_b),
            &mut ws.h_conv[..b * ch],
            b,
            s.flat,
            ch,
            true,
        );
        dense_forward(
            &ws.scal[..b * si],
            self.slice(&l.scalar_w),
            self.slice(&l.scalar_b),
            &mut ws.h_sc[..b * sh],
            b,
            si,
            sh,
            true,
        );
        for r in 0..b {
            ws.merged[r * mi..r * mi + ch].copy_from_slice(&ws.h_conv[r * ch..(r + 1) * ch]);
            ws.merged[r * mi + ch..(r + 1) * mi].copy_from_slice(&ws.h_sc[r * sh..(r + 1) * sh]);
        }
        dense_forward(
            &ws.merged[..b * mi],
            self.slice(&l.merge1_w),
            self.slice(&l.merge1_b),
            &mut ws.m1[..b * mh],
            b,
            mi,
            mh,
            true,
        );
        dense_forward(
            &ws.m1[..b * mh],
            self.slice(&l.merge2_w),
            self.slice(&l.merge2_b),
            &mut ws.m2[..b * mh],
            b,
            mh,
            mh,
            true,
        );
        dense_forward(
            &ws.m2[..b * mh],
            self.slice(&l.out_w),
            self.slice(&l.out_b),
            &mut ws.y[..b],
            b,
            mh,
            1,
            false,
        );

        // ---- loss ----
        let mut mse = 0.0;
        for (r, &i) in idx.iter().enumerate() {
            let err = ws.y[r] - targets[i];
            mse += err * err;
            ws.dy[r] = 2.0 * err / b as f64;
        }
        mse /= b as f64;

        // ---- backward ----
        let g = &mut ws.grads;
        g.iter_mut().for_each(|v| *v = 0.0);
        // Output layer (linear).
        {
            let (dw, db_span) = (l.out_w.clone(), l.out_b.clone());
            // Split disjoint gradient slices manually.
            dense_backward_into(
                g,
                &dw,
                &db_span,
                &ws.dy[..b],
                &ws.m2[..b * mh],
                self.slice(&l.out_w),
                Some(&mut ws.dm2[..b * mh]),
                b,
                mh,
                1,
            );
        }
        relu_mask(&mut ws.dm2[..b * mh], &ws.m2[..b * mh]);
        dense_backward_into(
            g,
            &l.merge2_w,
            &l.merge2_b,
            &ws.dm2[..b * mh],
            &ws.m1[..b * mh],
            self.slice(&l.merge2_w),
            Some(&mut ws.dm1[..b * mh]),
            b,
            mh,
            mh,
        );
        relu_mask(&mut ws.dm1[..b * mh], &ws.m1[..b * mh]);
        dense_backward_into(
            g,
            &l.merge1_w,
            &l.merge1_b,
            &ws.dm1[..b * mh],
            &ws.merged[..b * mi],
            self.slice(&l.merge1_w),
            Some(&mut ws.dmerged[..b * mi]),
            b,
            mi,
            mh,
        );
        for r in 0..b {
            ws.dh_conv[r * ch..(r + 1) * ch]
                .copy_from_slice(&ws.dmerged[r * mi..r * mi + ch]);
            ws.dh_sc[r * sh..(r + 1) * sh]
                .copy_from_slice(&ws.dmerged[r * mi + ch..(r + 1) * mi]);
        }
        relu_mask(&mut ws.dh_sc[..b * sh], &ws.h_sc[..b * sh]);
        dense_backward_into(
            g,
            &l.scalar_w,
            &l.scalar_b,
            &ws.dh_sc[..b * sh],
            &ws.scal[..b * si],
            self.slice(&l.scalar_w),
            None,
            b,
            si,
            sh,
        );
        relu_mask(&mut ws.dh_conv[..b * ch], &ws.h_conv[..b * ch]);
        dense_backward_into(
            g,
            &l.conv_dense_w,
            &l.conv_dense_b,
            &ws.dh_conv[..b * ch],
            &ws.a2[..b * s.flat],
            self.slice(&l.conv_dense_w),
            Some(&mut ws.da2[..b * s.flat]),
            b,
            s.flat,
            ch,
        );
        relu_mask(&mut ws.da2[..b * s.flat], &ws.a2[..b * s.flat]);

        // Convolutions, sample by sample (fixed order keeps sums deterministic).
        let need_input_grad = cfg.input_dense;
        for r in 0..b {
            let dz2 = &ws.da2[r * s.flat..(r + 1) * s.flat];
            let col2 = &ws.col2[r * s.k2_rows * hw2..(r + 1) * s.k2_rows * hw2];
            // dW2 += dZ2 COL2^T; db2 += row sums of dZ2.
            gemm_into(
                g,
                &l.conv2_w,
                f2,
                hw2,
                s.k2_rows,
                dz2,
                hw2,
                1,
                col2,
                1,
                hw2,
                1.0,
            );
            for f in 0..f2 {
                g[l.conv2_b.start + f] += dz2[f * hw2..(f + 1) * hw2].iter().sum::<f64>();
            }
            // dCOL2 = W2^T dZ2, scattered back to the conv1 activation grad.
            gemm(
                s.k2_rows,
                f2,
                hw2,
                1.0,
                self.slice(&l.conv2_w),
                1,
                s.k2_rows,
                dz2,
                hw2,
                1,
                0.0,
                &mut ws.dcol2,
            );
            ws.da1.iter_mut().for_each(|v| *v = 0.0);
            col2im_add(&ws.dcol2, f1, h1, w1, cfg.conv2_kernel, &mut ws.da1);
            relu_mask(&mut ws.da1, &ws.a1[r * f1 * hw1..(r + 1) * f1 * hw1]);

            let col1 = &ws.col1[r * s.k1_rows * hw1..(r + 1) * s.k1_rows * hw1];
            gemm_into(
                g,
                &l.conv1_w,
                f1,
                hw1,
                s.k1_rows,
                &ws.da1,
                hw1,
                1,
                col1,
                1,
                hw1,
                1.0,
            );
            for f in 0..f1 {
                g[l.conv1_b.start + f] += ws.da1[f * hw1..(f + 1) * hw1].iter().sum::<f64>();
            }

            if need_input_grad {
                gemm(
                    s.k1_rows,
                    f1,
                    hw1,
                    1.0,
                    self.slice(&l.conv1_w),
                    1,
                    s.k1_rows,
                    &ws.da1,
                    hw1,
                    1,
                    0.0,
                    &mut ws.dcol1,
                );
                let da0 = &mut ws.da0[r * s.hw..(r + 1) * s.hw];
                da0.iter_mut().for_each(|v| *v = 0.0);
                col2im_add(&ws.dcol1, 1, cfg.grid_h, cfg.grid_w, cfg.conv1_kernel, da0);
            }
        }
        if cfg.input_dense {
            relu_mask(&mut ws.da0[..b * s.hw], &ws.a0[..b * s.hw]);
            dense_backward_into(
                g,
                &l.input_dense_w,
                &l.input_dense_b,
                &ws.da0[..b * s.hw],
                &ws.xbuf[..b * s.hw],
                self.slice(&l.input_dense_w),
                None,
                b,
                s.hw,
                s.hw,
            );
        }
        mse
    }

    /// Shuffled minibatch regression with RMSProp; returns the mean squared
    /// error over the final epoch. Deterministic for a fixed seed.
    pub fn train(&mut self, samples: &[Sample<'_>], targets: &[f64], seed: u64) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("empty training set".into()));
        }
        if samples.len() != targets.len() {
            return Err(Error::LengthMismatch(format!(
                "{} samples vs {} targets",
                samples.len(),
                targets.len()
            )));
        }
        let cfg = self.cfg;
        let batch = cfg.batch_size.min(samples.len());
        let mut ws = Workspace::new(self, batch);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut last_epoch_mse = 0.0;
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut sse = 0.0;
            for chunk in order.chunks(batch) {
                let mse = self.gradient_into(samples, targets, chunk, &mut ws);
                sse += mse * chunk.len() as f64;
                let grads = std::mem::take(&mut ws.grads);
                {
                    let (params, rms) = self.rms_mut();
                    rmsprop_step(params, rms, &grads, cfg.learning_rate, cfg.rho, cfg.epsilon);
                }
                ws.grads = grads;
            }
            last_epoch_mse = sse / samples.len() as f64;
        }
        Ok(last_epoch_mse)
    }
}

/// dW/db written into the flat gradient vector plus optional dX.
#[allow(clippy::too_many_arguments)]
fn dense_backward_into(
    grads: &mut [f64],
    w_range: &std::ops::Range<usize>,
    b_range: &std::ops::Range<usize>,
    dy: &[f64],
    x: &[f64],
    w: &[f64],
    dx: Option<&mut [f64]>,
    b: usize,
    n_in: usize,
    n_out: usize,
) {
    // Borrow disjoint regions of the gradient vector.
    debug_assert!(w_range.end <= b_range.start || b_range.end <= w_range.start);
    let (dw_ptr, db_ptr) = (w_range.clone(), b_range.clone());
    // Safe split: ranges are disjoint by layout construction.
    let dw = unsafe {
        std::slice::from_raw_parts_mut(grads.as_mut_ptr().add(dw_ptr.start), dw_ptr.len())
    };
    let db = unsafe {
        std::slice::from_raw_parts_mut(grads.as_mut_ptr().add(db_ptr.start), db_ptr.len())
    };
    dense_backward(dy, x, w, dw, db, dx, b, n_in, n_out);
}

/// C_range of `grads` += alpha-less GEMM accumulation (beta controls reuse).
#[allow(clippy::too_many_arguments)]
fn gemm_into(
    grads: &mut [f64],
    range: &std::ops::Range<usize>,
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
) {
    let c = &mut grads[range.clone()];
    gemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c);
}

#[cfg(test)]
mod tests {
    use super::super::{QNetwork, QNetworkConfig, Sample};
    use super::rmsprop_step;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> QNetworkConfig {
        QNetworkConfig {
            grid_h: 8,
            grid_w: 8,
            conv1_filters: 2,
            conv1_kernel: 3,
            conv2_filters: 3,
            conv2_kernel: 3,
            conv_hidden: 6,
            scalar_hidden: 4,
            merge_hidden: 5,
            ..QNetworkConfig::default()
        }
    }

    fn random_batch(n: usize, hw: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grids: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..hw).map(|_| rng.random_range(0.0..1.0)).collect())
            .collect();
        let scalars: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let targets: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        (grids, scalars, targets)
    }

    fn batch_mse(net: &QNetwork, samples: &[Sample], targets: &[f64]) -> f64 {
        samples
            .iter()
            .zip(targets)
            .map(|(s, &t)| {
                let err = net.forward(s.grid, s.scalars) - t;
                err * err
            })
            .sum::<f64>()
            / samples.len() as f64
    }

    /// Seeds every parameter, biases included, away from zero. Zero-valued
    /// biases put ReLU pre-activations exactly on their kink (dead input
    /// patches make the conv contribution exactly zero), where the central
    /// difference measures the two-sided average while backprop takes the
    /// standard zero-at-kink subgradient.
    fn randomize_all_params(net: &mut QNetwork, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in net.params_mut() {
            *p += rng.random_range(0.01..0.08) * if rng.random::<bool>() { 1.0 } else { -1.0 };
        }
    }

    /// Central finite differences over every parameter at the given step.
    /// With `skip_kinks`, parameters whose one-sided differences disagree
    /// (the probe sits on or across a ReLU kink, where no derivative exists)
    /// are excluded; a genuine backprop bug leaves the one-sided quotients
    /// agreeing with each other while both differ from the analytic value.
    fn finite_difference_check(
        cfg: QNetworkConfig,
        net_seed: u64,
        data_seed: u64,
        n: usize,
        step: f64,
        skip_kinks: bool,
    ) -> f64 {
        let mut net = QNetwork::new(cfg, net_seed).unwrap();
        randomize_all_params(&mut net, net_seed ^ 0x5eed);
        let hw = net.shapes().hw;
        let (grids, scalars, targets) = random_batch(n, hw, data_seed);
        let samples: Vec<Sample> = grids
            .iter()
            .zip(&scalars)
            .map(|(g, s)| Sample {
                grid: g,
                scalars: s,
            })
            .collect();
        let (analytic, _) = net.batch_gradient(&samples, &targets);
        let mut loss_at = |net: &mut QNetwork, k: usize, h: f64| -> f64 {
            let orig = net.params()[k];
            net.params_mut()[k] = orig + h;
            let value = batch_mse(net, &samples, &targets);
            net.params_mut()[k] = orig;
            value
        };
        let rel = |a: f64, b: f64| -> f64 {
            let denom = a.abs().max(b.abs());
            if denom < 1e-8 {
                0.0
            } else {
                (a - b).abs() / denom
            }
        };
        let mut worst = 0.0f64;
        for k in 0..net.num_params() {
            let plus = loss_at(&mut net, k, step);
            let minus = loss_at(&mut net, k, -step);
            let base = loss_at(&mut net, k, 0.0);
            let central = (plus - minus) / (2.0 * step);
            let err = rel(analytic[k], central);
            if err > 1e-4 && skip_kinks {
                let fwd = (plus - base) / step;
                let bwd = (base - minus) / step;
                if rel(fwd, bwd) > 1e-2 {
                    continue;
                }
            }
            worst = worst.max(err);
        }
        worst
    }

    #[test]
    fn gradients_match_finite_differences() {
        // Seed verified to keep every probe away from ReLU kinks; the margin
        // is several orders below the tolerance.
        let worst = finite_difference_check(tiny_cfg(), 17, 17 ^ 0xabc, 3, 1e-4, false);
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn gradients_match_finite_differences_random_nets() {
        for seed in [11u64, 13, 29, 71, 101] {
            let worst = finite_difference_check(tiny_cfg(), seed, seed ^ 0xabc, 3, 1e-4, true);
            assert!(worst < 1e-4, "seed {seed}: max relative error {worst}");
        }
    }

    #[test]
    fn gradients_match_finite_differences_with_input_dense() {
        let cfg = QNetworkConfig {
            input_dense: true,
            grid_h: 6,
            grid_w: 6,
            conv1_filters: 2,
            conv1_kernel: 3,
            conv2_filters: 2,
            conv2_kernel: 2,
            conv_hidden: 4,
            scalar_hidden: 3,
            merge_hidden: 4,
            ..QNetworkConfig::default()
        };
        let worst = finite_difference_check(cfg, 13, 13 ^ 0xabc, 2, 1e-4, true);
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn zero_error_gives_zero_gradient() {
        // The batched and single-sample paths sum in different orders, so
        // "zero" is zero up to one rounding ulp of the shared value.
        let net = QNetwork::new(tiny_cfg(), 4).unwrap();
        let grid: Vec<f64> = (0..64).map(|i| (i as f64 * 0.2).sin().abs()).collect();
        let scal = [0.4, 0.1, 0.6];
        let y = net.forward(&grid, &scal);
        let (grads, mse) = net.batch_gradient(
            &[Sample {
                grid: &grid,
                scalars: &scal,
            }],
            &[y],
        );
        assert!(mse < 1e-28, "mse {mse}");
        assert!(grads.iter().all(|&g| g.abs() < 1e-12));
    }

    #[test]
    fn batch_gradient_is_mean_of_sample_gradients() {
        let net = QNetwork::new(tiny_cfg(), 8).unwrap();
        let (grids, scalars, targets) = random_batch(4, 64, 2);
        let samples: Vec<Sample> = grids
            .iter()
            .zip(&scalars)
            .map(|(g, s)| Sample {
                grid: g,
                scalars: s,
            })
            .collect();
        let (batch, _) = net.batch_gradient(&samples, &targets);
        let mut mean = vec![0.0; net.num_params()];
        for (s, &t) in samples.iter().zip(&targets) {
            let (g, _) = net.batch_gradient(&[*s], &[t]);
            for (m, v) in mean.iter_mut().zip(&g) {
                *m += v / samples.len() as f64;
            }
        }
        for (a, b) in batch.iter().zip(&mean) {
            assert_relative_eq!(a, b, epsilon = 1e-12, max_relative = 1e-9);
        }
    }

    #[test]
    fn rmsprop_frozen_first_step() {
        let mut p = [1.0];
        let mut ms = [0.0];
        rmsprop_step(&mut p, &mut ms, &[1.0], 0.001, 0.9, 1e-6);
        assert_relative_eq!(ms[0], 0.1, max_relative = 1e-12);
        let expected = 1.0 - 0.001 / (0.1f64.sqrt() + 1e-6);
        assert_relative_eq!(p[0], expected, max_relative = 1e-12);
        // Numerically ~= 1 - 0.0031623.
        assert!((p[0] - (1.0 - 0.0031623)).abs() < 1e-6);
    }

    #[test]
    fn rmsprop_zero_gradient_is_identity() {
        let mut p = [0.5, -2.0];
        let mut ms = [0.3, 0.0];
        rmsprop_step(&mut p, &mut ms, &[0.0, 0.0], 0.001, 0.9, 1e-6);
        assert_eq!(p, [0.5, -2.0]);
    }

    #[test]
    fn rmsprop_constant_gradient_step_approaches_lr() {
        let mut p = [0.0];
        let mut ms = [0.0];
        let mut last = p[0];
        for _ in 0..400 {
            last = p[0];
            rmsprop_step(&mut p, &mut ms, &[2.5], 0.001, 0.9, 1e-6);
        }
        let step = (p[0] - last).abs();
        assert_relative_eq!(ms[0], 2.5 * 2.5, max_relative = 1e-10);
        assert_relative_eq!(step, 0.001, max_relative = 1e-3);
    }

    #[test]
    fn training_memorizes_single_sample() {
        let cfg = QNetworkConfig {
            epochs: 200,
            ..tiny_cfg()
        };
        let mut net = QNetwork::new(cfg, 3).unwrap();
        let grid: Vec<f64> = (0..64).map(|i| ((i % 9) as f64) / 9.0).collect();
        let scal = [0.3, -0.2, 0.5];
        let sample = Sample {
            grid: &grid,
            scalars: &scal,
        };
        net.train(&[sample], &[2.0], 17).unwrap();
        let out = net.forward(&grid, &scal);
        assert!((out - 2.0).abs() < 0.05, "memorization failed: {out}");
    }

    #[test]
    fn conflicting_targets_converge_to_mean() {
        let cfg = QNetworkConfig {
            epochs: 300,
            ..tiny_cfg()
        };
        let mut net = QNetwork::new(cfg, 5).unwrap();
        let grid: Vec<f64> = (0..64).map(|i| ((i % 5) as f64) / 5.0).collect();
        let scal = [0.1, 0.1, 0.1];
        let s = Sample {
            grid: &grid,
            scalars: &scal,
        };
        net.train(&[s, s], &[1.0, 3.0], 23).unwrap();
        let out = net.forward(&grid, &scal);
        assert!((out - 2.0).abs() < 0.1, "expected ~2.0, got {out}");
    }

    #[test]
    fn training_is_deterministic() {
        let (grids, scalars, targets) = random_batch(20, 64, 7);
        let build = || {
            let mut net = QNetwork::new(tiny_cfg(), 9).unwrap();
            let samples: Vec<Sample> = grids
                .iter()
                .zip(&scalars)
                .map(|(g, s)| Sample {
                    grid: g,
                    scalars: s,
                })
                .collect();
            net.train(&samples, &targets, 31).unwrap();
            net
        };
        let a = build();
        let b = build();
        assert_eq!(a.params(), b.params());
    }

    #[test]
    fn toy_regression_mse_decreases_for_most_seeds() {
        // A separable toy target: weighted grid mass plus a scalar term.
        let mut monotone = 0;
        let runs = 20;
        for seed in 0..runs {
            let cfg = QNetworkConfig {
                epochs: 1,
                ..tiny_cfg()
            };
            let mut net = QNetwork::new(cfg, 100 + seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let grids: Vec<Vec<f64>> = (0..32)
                .map(|_| (0..64).map(|_| rng.random_range(0.0..1.0)).collect())
                .collect();
            let scalars: Vec<Vec<f64>> = (0..32)
                .map(|_| (0..3).map(|_| rng.random_range(0.0..1.0)).collect())
                .collect();
            let targets: Vec<f64> = grids
                .iter()
                .zip(&scalars)
                .map(|(g, s)| g.iter().sum::<f64>() / 64.0 + 0.5 * s[2])
                .collect();
            let samples: Vec<Sample> = grids
                .iter()
                .zip(&scalars)
                .map(|(g, s)| Sample {
                    grid: g,
                    scalars: s,
                })
                .collect();
            let mut mses = Vec::new();
            for epoch in 0..12 {
                mses.push(net.train(&samples, &targets, 900 + epoch).unwrap());
            }
            if mses.windows(2).all(|w| w[1] <= w[0] + 1e-9) {
                monotone += 1;
            }
        }
        assert!(
            monotone * 100 >= runs * 95,
            "only {monotone}/{runs} runs decreased monotonically"
        );
    }
}
