//! Raw compute kernels over row-major slices.
//!
//! These are shared by the differentiable graph and by the spiking forward
//! simulation, which runs without gradient tracking. Batch-parallel kernels
//! write disjoint outputs or reduce per-sample partials in sample order, so
//! results do not depend on the thread count.

use rayon::prelude::*;

/// `C[m,n] = A[m,k] · B[k,n]`. Zero entries of `A` are skipped, which pays off
/// when `A` holds binary spikes.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0; m * n];
    for (a_row, c_row) in a.chunks_exact(k).zip(c.chunks_exact_mut(n)) {
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
    c
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

/// Geometry of a 2-D cross-correlation with zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel_h) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel_w) / self.stride + 1
    }

    fn in_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    fn out_len(&self) -> usize {
        self.out_channels * self.out_height() * self.out_width()
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel_h * self.kernel_w
    }

    /// Output columns `ow` whose input column `ow*stride + kj - padding` is in range.
    fn valid_cols(&self, kj: usize) -> std::ops::Range<usize> {
        valid_range(kj, self.stride, self.padding, self.width, self.out_width())
    }

    fn valid_rows(&self, ki: usize) -> std::ops::Range<usize> {
        valid_range(ki, self.stride, self.padding, self.height, self.out_height())
    }
}

fn valid_range(k: usize, stride: usize, pad: usize, extent: usize, out: usize) -> std::ops::Range<usize> {
    // smallest o with o*stride + k >= pad
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    // largest o with o*stride + k - pad < extent
    let hi = if extent + pad <= k {
        0
    } else {
        ((extent + pad - k - 1) / stride + 1).min(out)
    };
    lo..hi.max(lo)
}

pub fn conv2d_forward(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh_n, ow_n) = (g.out_height(), g.out_width());
    let mut out = vec![0.0; g.batch * g.out_len()];
    out.par_chunks_mut(g.out_len())
        .zip(x.par_chunks(g.in_len()))
        .for_each(|(o_b, x_b)| {
            for f in 0..g.out_channels {
                let o_f = &mut o_b[f * oh_n * ow_n..(f + 1) * oh_n * ow_n];
                for c in 0..g.in_channels {
                    let x_c = &x_b[c * g.height * g.width..(c + 1) * g.height * g.width];
                    for ki in 0..g.kernel_h {
                        for kj in 0..g.kernel_w {
                            let wv = w[((f * g.in_channels + c) * g.kernel_h + ki) * g.kernel_w + kj];
                            if wv == 0.0 {
                                continue;
                            }
                            let cols = g.valid_cols(kj);
                            for oh in g.valid_rows(ki) {
                                let ih = oh * g.stride + ki - g.padding;
                                let x_row = &x_c[ih * g.width..(ih + 1) * g.width];
                                let o_row = &mut o_f[oh * ow_n..(oh + 1) * ow_n];
                                for ow in cols.clone() {
                                    o_row[ow] += wv * x_row[ow * g.stride + kj - g.padding];
                                }
                            }
                        }
                    }
                }
            }
        });
    out
}

pub fn conv2d_backward_input(dy: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh_n, ow_n) = (g.out_height(), g.out_width());
    let mut dx = vec![0.0; g.batch * g.in_len()];
    dx.par_chunks_mut(g.in_len())
        .zip(dy.par_chunks(g.out_len()))
        .for_each(|(dx_b, dy_b)| {
            for f in 0..g.out_channels {
                let dy_f = &dy_b[f * oh_n * ow_n..(f + 1) * oh_n * ow_n];
                for c in 0..g.in_channels {
                    let dx_c = &mut dx_b[c * g.height * g.width..(c + 1) * g.height * g.width];
                    for ki in 0..g.kernel_h {
                        for kj in 0..g.kernel_w {
                            let wv = w[((f * g.in_channels + c) * g.kernel_h + ki) * g.kernel_w + kj];
                            let cols = g.valid_cols(kj);
                            for oh in g.valid_rows(ki) {
                                let ih = oh * g.stride + ki - g.padding;
                                for ow in cols.clone() {
                                    dx_c[ih * g.width + ow * g.stride + kj - g.padding] += wv * dy_f[oh * ow_n + ow];
                                }
                            }
                        }
                    }
                }
            }
        });
    dx
}

pub fn conv2d_backward_weight(dy: &[f64], x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh_n, ow_n) = (g.out_height(), g.out_width());
    let partials: Vec<Vec<f64>> = dy
        .par_chunks(g.out_len())
        .zip(x.par_chunks(g.in_len()))
        .map(|(dy_b, x_b)| {
            let mut dw = vec![0.0; g.weight_len()];
            for f in 0..g.out_channels {
                let dy_f = &dy_b[f * oh_n * ow_n..(f + 1) * oh_n * ow_n];
                for c in 0..g.in_channels {
                    let x_c = &x_b[c * g.height * g.width..(c + 1) * g.height * g.width];
                    for ki in 0..g.kernel_h {
                        for kj in 0..g.kernel_w {
                            let cols = g.valid_cols(kj);
                            let mut acc = 0.0;
                            for oh in g.valid_rows(ki) {
                                let ih = oh * g.stride + ki - g.padding;
                                for ow in cols.clone() {
                                    acc += dy_f[oh * ow_n + ow] * x_c[ih * g.width + ow * g.stride + kj - g.padding];
                                }
                            }
                            dw[((f * g.in_channels + c) * g.kernel_h + ki) * g.kernel_w + kj] += acc;
                        }
                    }
                }
            }
            dw
        })
        .collect();
    let mut dw = vec![0.0; g.weight_len()];
    for p in partials {
        for (d, v) in dw.iter_mut().zip(p) {
            *d += v;
        }
    }
    dw
}

/// Mean over non-overlapping `k×k` windows of a `[planes, h, w]` block.
pub fn avg_pool_forward(x: &[f64], planes: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let (oh, ow) = (h / k, w / k);
    let inv = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let x_p = &x[p * h * w..(p + 1) * h * w];
        let o_p = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for i in 0..h {
            for j in 0..w {
                o_p[(i / k) * ow + j / k] += x_p[i * w + j] * inv;
            }
        }
    }
    out
}

pub fn avg_pool_backward(dy: &[f64], planes: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let (oh, ow) = (h / k, w / k);
    let inv = 1.0 / (k * k) as f64;
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let dy_p = &dy[p * oh * ow..(p + 1) * oh * ow];
        for i in 0..h {
            for j in 0..w {
                dx[p * h * w + i * w + j] = dy_p[(i / k) * ow + j / k] * inv;
            }
        }
    }
    dx
}
