//! Dense kernels on row-major `f64` buffers.

/// `C = alpha * op(A) * op(B) + beta * C` with `op(A)` m×k, `op(B)` k×n and
/// `C` m×n, all row-major. `ta`/`tb` mean the stored matrix is the transpose.
#[allow(clippy::too_many_arguments)]
pub fn gemm(ta: bool, tb: bool, m: usize, n: usize, k: usize, alpha: f64, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: strides describe buffers of at least the asserted sizes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `y = W x + b`, W is `out × in`.
pub fn matvec_bias(w: &[f64], b: &[f64], x: &[f64], y: &mut [f64]) {
    let n_in = x.len();
    for (o, yo) in y.iter_mut().enumerate() {
        let row = &w[o * n_in..(o + 1) * n_in];
        *yo = b[o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// Geometry of a 3×3, padding-1 convolution over a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConvShape {
    pub cin: usize,
    pub cout: usize,
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub stride: usize,
}

impl ConvShape {
    pub fn out_h(&self) -> usize {
        (self.h - 1) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w - 1) / self.stride + 1
    }

    /// Rows of the column matrix.
    pub fn k(&self) -> usize {
        self.cin * 9
    }

    /// Columns of the column matrix (all output positions of the batch).
    pub fn n(&self) -> usize {
        self.batch * self.out_h() * self.out_w()
    }

    pub fn weights(&self) -> usize {
        self.cout * self.k()
    }
}

/// Unfolds `x` (`[cin][batch][h][w]`) into a `k × n` column matrix.
pub fn im2col(s: &ConvShape, x: &[f64], cols: &mut Vec<f64>) {
    let (oh, ow) = (s.out_h(), s.out_w());
    let n = s.n();
    cols.clear();
    cols.resize(s.k() * n, 0.0);
    for ci in 0..s.cin {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * n;
                for b in 0..s.batch {
                    let plane = &x[(ci * s.batch + b) * s.h * s.w..][..s.h * s.w];
                    for oy in 0..oh {
                        let iy = (oy * s.stride + ky) as isize - 1;
                        if iy < 0 || iy >= s.h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * s.w..][..s.w];
                        let dst = &mut cols[row + (b * oh + oy) * ow..][..ow];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * s.stride + kx) as isize - 1;
                            if ix >= 0 && ix < s.w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates column gradients into `dx`.
pub fn col2im(s: &ConvShape, dcols: &[f64], dx: &mut [f64]) {
    let (oh, ow) = (s.out_h(), s.out_w());
    let n = s.n();
    for ci in 0..s.cin {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * n;
                for b in 0..s.batch {
                    let plane = &mut dx[(ci * s.batch + b) * s.h * s.w..][..s.h * s.w];
                    for oy in 0..oh {
                        let iy = (oy * s.stride + ky) as isize - 1;
                        if iy < 0 || iy >= s.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * s.w..][..s.w];
                        let src = &dcols[row + (b * oh + oy) * ow..][..ow];
                        for (ox, g) in src.iter().enumerate() {
                            let ix = (ox * s.stride + kx) as isize - 1;
                            if ix >= 0 && ix < s.w as isize {
                                dst[ix as usize] += g;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution: `out[cout][n] = W cols + b`.
pub fn conv_forward(s: &ConvShape, w: &[f64], b: &[f64], cols: &[f64], out: &mut Vec<f64>) {
    let n = s.n();
    out.clear();
    out.resize(s.cout * n, 0.0);
    for (co, chunk) in out.chunks_exact_mut(n).enumerate() {
        chunk.fill(b[co]);
    }
    gemm(false, false, s.cout, n, s.k(), 1.0, w, cols, 1.0, out);
}

/// Backward convolution. Accumulates into `dw`/`db`; writes column
/// gradients into `dcols` when requested.
pub fn conv_backward(
    s: &ConvShape,
    w: &[f64],
    cols: &[f64],
    dout: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    dcols: Option<&mut Vec<f64>>,
) {
    let n = s.n();
    gemm(false, true, s.cout, s.k(), n, 1.0, dout, cols, 1.0, dw);
    for (co, chunk) in dout.chunks_exact(n).enumerate() {
        db[co] += chunk.iter().sum::<f64>();
    }
    if let Some(dc) = dcols {
        dc.clear();
        dc.resize(s.k() * n, 0.0);
        gemm(true, false, s.k(), n, s.cout, 1.0, w, dout, 0.0, dc);
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn relu_inplace(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zeroes gradient entries where the activation output was not positive.
pub fn relu_mask(y: &[f64], dy: &mut [f64]) {
    for (g, &v) in dy.iter_mut().zip(y) {
        if v <= 0.0 {
            *g = 0.0;
        }
    }
}
