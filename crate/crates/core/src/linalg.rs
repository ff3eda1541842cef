//! Small dense linear-algebra helpers shared by the network code: a GEMM
//! wrapper, unrolled dot/axpy kernels and im2col/col2im for valid 2-d
//! cross-correlation.

/// C (m x n, row-major) = alpha * A * B + beta * C, with arbitrary strides on
/// A and B so transposed views need no copies.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(a.len() >= (m - 1) * rsa + (k - 1) * csa + 1);
    debug_assert!(b.len() >= (k - 1) * rsb + (n - 1) * csb + 1);
    debug_assert!(c.len() >= m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Dot product with four independent accumulators.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut tail = 0.0;
    for j in chunks * 4..a.len() {
        tail += a[j] * b[j];
    }
    acc[0] + acc[1] + acc[2] + acc[3] + tail
}

/// y += alpha * x.
pub fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Expands `input` (channels x h x w, row-major) into the column matrix for a
/// valid cross-correlation with a `kernel x kernel` window: output is
/// `(channels * kernel * kernel) x (out_h * out_w)` row-major, so that
/// `W (filters x ckk) * col` yields the feature maps.
pub fn im2col(
    input: &[f64],
    channels: usize,
    h: usize,
    w: usize,
    kernel: usize,
    col: &mut [f64],
) {
    let out_h = h - kernel + 1;
    let out_w = w - kernel + 1;
    let out_hw = out_h * out_w;
    debug_assert_eq!(input.len(), channels * h * w);
    debug_assert_eq!(col.len(), channels * kernel * kernel * out_hw);
    let mut row = 0;
    for c in 0..channels {
        let plane = &input[c * h * w..(c + 1) * h * w];
        for ku in 0..kernel {
            for kv in 0..kernel {
                let dst = &mut col[row * out_hw..(row + 1) * out_hw];
                for i in 0..out_h {
                    let src = &plane[(i + ku) * w + kv..(i + ku) * w + kv + out_w];
                    dst[i * out_w..(i + 1) * out_w].copy_from_slice(src);
                }
                row += 1;
            }
        }
    }
}

/// Scatters column-matrix gradients back onto the input layout; the adjoint
/// of [`im2col`]. Accumulates into `grad_input`.
pub fn col2im_add(
    col: &[f64],
    channels: usize,
    h: usize,
    w: usize,
    kernel: usize,
    grad_input: &mut [f64],
) {
    let out_h = h - kernel + 1;
    let out_w = w - kernel + 1;
    let out_hw = out_h * out_w;
    debug_assert_eq!(grad_input.len(), channels * h * w);
    debug_assert_eq!(col.len(), channels * kernel * kernel * out_hw);
    let mut row = 0;
    for c in 0..channels {
        let plane = &mut grad_input[c * h * w..(c + 1) * h * w];
        for ku in 0..kernel {
            for kv in 0..kernel {
                let src = &col[row * out_hw..(row + 1) * out_hw];
                for i in 0..out_h {
                    let dst = &mut plane[(i + ku) * w + kv..(i + ku) * w + kv + out_w];
                    axpy(dst, 1.0, &src[i * out_w..(i + 1) * out_w]);
                }
                row += 1;
            }
        }
    }
}
