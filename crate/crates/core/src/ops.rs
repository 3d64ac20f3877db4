//! Channels-last numeric kernels and their adjoints.
//!
//! All feature maps here are `(batch, height, width, channels)` buffers, so a
//! map with `rows = batch * height * width` pixels doubles as a `rows x channels`
//! matrix.

use crate::scalar::Scalar;

/// `y = x W^T + b` with `x: rows x cin`, `W: cout x cin`.
pub fn linear<T: Scalar>(
    x: &[T],
    rows: usize,
    cin: usize,
    w: &[T],
    b: Option<&[T]>,
    cout: usize,
) -> Vec<T> {
    let mut y = vec![T::zero(); rows * cout];
    if let Some(b) = b {
        for row in y.chunks_exact_mut(cout) {
            row.copy_from_slice(b);
        }
    }
    let beta = if b.is_some() { T::one() } else { T::zero() };
    T::gemm(
        rows,
        cin,
        cout,
        T::one(),
        x,
        cin,
        1,
        w,
        1,
        cin,
        beta,
        &mut y,
        cout,
        1,
    );
    y
}

/// Adjoint of [`linear`]: accumulates `dW += dy^T x`, `db += sum(dy)` and returns `dx`.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward<T: Scalar>(
    dy: &[T],
    x: &[T],
    rows: usize,
    cin: usize,
    w: &[T],
    cout: usize,
    dw: &mut [T],
    db: Option<&mut [T]>,
    need_dx: bool,
) -> Vec<T> {
    T::gemm(
        cout,
        rows,
        cin,
        T::one(),
        dy,
        1,
        cout,
        x,
        cin,
        1,
        T::one(),
        dw,
        cin,
        1,
    );
    if let Some(db) = db {
        for row in dy.chunks_exact(cout) {
            for (g, &d) in db.iter_mut().zip(row) {
                *g += d;
            }
        }
    }
    if !need_dx {
        return Vec::new();
    }
    let mut dx = vec![T::zero(); rows * cin];
    T::gemm(
        rows,
        cout,
        cin,
        T::one(),
        dy,
        cout,
        1,
        w,
        cin,
        1,
        T::zero(),
        &mut dx,
        cin,
        1,
    );
    dx
}

/// Geometry of a dense 2-D convolution over a channels-last map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub cin: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_rows(&self) -> usize {
        self.batch * self.out_h() * self.out_w()
    }

    /// Column count of the unfolded patch matrix, ordered `(ky, kx, cin)`.
    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.cin
    }
}

/// Unfold input patches into an `out_rows x patch_len` matrix (zero padding).
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeometry) -> Vec<T> {
    let (oh, ow, k, c) = (g.out_h(), g.out_w(), g.kernel, g.cin);
    let plen = g.patch_len();
    let mut cols = vec![T::zero(); g.out_rows() * plen];
    let mut r = 0;
    for b in 0..g.batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = &mut cols[r * plen..(r + 1) * plen];
                for ky in 0..k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.in_w as isize {
                            continue;
                        }
                        let src = ((b * g.in_h + iy as usize) * g.in_w + ix as usize) * c;
                        let dst = (ky * k + kx) * c;
                        row[dst..dst + c].copy_from_slice(&x[src..src + c]);
                    }
                }
                r += 1;
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add patch gradients back onto the input grid.
pub fn col2im<T: Scalar>(dcols: &[T], g: &ConvGeometry) -> Vec<T> {
    let (oh, ow, k, c) = (g.out_h(), g.out_w(), g.kernel, g.cin);
    let plen = g.patch_len();
    let mut dx = vec![T::zero(); g.batch * g.in_h * g.in_w * c];
    let mut r = 0;
    for b in 0..g.batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = &dcols[r * plen..(r + 1) * plen];
                for ky in 0..k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.in_w as isize {
                            continue;
                        }
                        let dst = ((b * g.in_h + iy as usize) * g.in_w + ix as usize) * c;
                        let src = (ky * k + kx) * c;
                        for (d, &s) in dx[dst..dst + c].iter_mut().zip(&row[src..src + c]) {
                            *d += s;
                        }
                    }
                }
                r += 1;
            }
        }
    }
    dx
}

/// `(cout, cin, k, k)` -> `(cout, k, k, cin)`.
pub fn weight_oihw_to_ohwi<T: Scalar>(w: &[T], cout: usize, cin: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); w.len()];
    for o in 0..cout {
        for i in 0..cin {
            for p in 0..k * k {
                out[(o * k * k + p) * cin + i] = w[(o * cin + i) * k * k + p];
            }
        }
    }
    out
}

/// `(cout, k, k, cin)` -> `(cout, cin, k, k)`.
pub fn weight_ohwi_to_oihw<T: Scalar>(w: &[T], cout: usize, cin: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); w.len()];
    for o in 0..cout {
        for i in 0..cin {
            for p in 0..k * k {
                out[(o * cin + i) * k * k + p] = w[(o * k * k + p) * cin + i];
            }
        }
    }
    out
}

/// Depthwise `k x k` convolution, stride 1, padding `k / 2`.
///
/// `w_t` is the kernel laid out as `(k * k, channels)`.
pub fn depthwise_conv<T: Scalar>(
    x: &[T],
    (batch, h, w, c): (usize, usize, usize, usize),
    w_t: &[T],
    bias: &[T],
    k: usize,
) -> Vec<T> {
    let pad = (k / 2) as isize;
    let mut y = vec![T::zero(); x.len()];
    for b in 0..batch {
        for oy in 0..h {
            for ox in 0..w {
                let out = &mut y[((b * h + oy) * w + ox) * c..][..c];
                out.copy_from_slice(bias);
                for ky in 0..k {
                    let iy = oy as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = ox as isize + kx as isize - pad;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = &x[((b * h + iy as usize) * w + ix as usize) * c..][..c];
                        let wk = &w_t[(ky * k + kx) * c..][..c];
                        for ((o, &s), &wv) in out.iter_mut().zip(src).zip(wk) {
                            *o += s * wv;
                        }
                    }
                }
            }
        }
    }
    y
}

/// Adjoint of [`depthwise_conv`]; accumulates into `dw_t` / `db`, returns `dx`.
pub fn depthwise_conv_backward<T: Scalar>(
    dy: &[T],
    x: &[T],
    (batch, h, w, c): (usize, usize, usize, usize),
    w_t: &[T],
    k: usize,
    dw_t: &mut [T],
    db: &mut [T],
) -> Vec<T> {
    let pad = (k / 2) as isize;
    let mut dx = vec![T::zero(); x.len()];
    for b in 0..batch {
        for oy in 0..h {
            for ox in 0..w {
                let g = &dy[((b * h + oy) * w + ox) * c..][..c];
                for (d, &v) in db.iter_mut().zip(g) {
                    *d += v;
                }
                for ky in 0..k {
                    let iy = oy as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = ox as isize + kx as isize - pad;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let off = ((b * h + iy as usize) * w + ix as usize) * c;
                        let src = &x[off..off + c];
                        let wk = &w_t[(ky * k + kx) * c..][..c];
                        let dwk = &mut dw_t[(ky * k + kx) * c..][..c];
                        for i in 0..c {
                            dwk[i] += g[i] * src[i];
                        }
                        for ((d, &gv), &wv) in dx[off..off + c].iter_mut().zip(g).zip(wk) {
                            *d += gv * wv;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Saved statistics of a layer normalization pass.
#[derive(Clone, Debug)]
pub struct NormStats<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

/// Normalize each length-`c` row, then scale and shift.
pub fn layer_norm<T: Scalar>(
    x: &[T],
    c: usize,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> (Vec<T>, NormStats<T>) {
    let rows = x.len() / c;
    let inv_c = T::one() / T::c(c as f64);
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    for r in 0..rows {
        let row = &x[r * c..(r + 1) * c];
        let mean = row.iter().copied().sum::<T>() * inv_c;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for i in 0..c {
            let xh = (row[i] - mean) * rs;
            xhat[r * c + i] = xh;
            y[r * c + i] = xh * gamma[i] + beta[i];
        }
    }
    (y, NormStats { xhat, rstd })
}

pub fn layer_norm_backward<T: Scalar>(
    dy: &[T],
    stats: &NormStats<T>,
    c: usize,
    gamma: &[T],
    dgamma: &mut [T],
    dbeta: &mut [T],
) -> Vec<T> {
    let rows = dy.len() / c;
    let inv_c = T::one() / T::c(c as f64);
    let mut dx = vec![T::zero(); dy.len()];
    for r in 0..rows {
        let g = &dy[r * c..(r + 1) * c];
        let xh = &stats.xhat[r * c..(r + 1) * c];
        let mut sum_d = T::zero();
        let mut sum_dx = T::zero();
        for i in 0..c {
            dgamma[i] += g[i] * xh[i];
            dbeta[i] += g[i];
            let d = g[i] * gamma[i];
            sum_d += d;
            sum_dx += d * xh[i];
        }
        let (mean_d, mean_dx) = (sum_d * inv_c, sum_dx * inv_c);
        for i in 0..c {
            let d = g[i] * gamma[i];
            dx[r * c + i] = stats.rstd[r] * (d - mean_d - xh[i] * mean_dx);
        }
    }
    dx
}

pub fn gelu<T: Scalar>(x: &[T]) -> Vec<T> {
    let half = T::c(0.5);
    let inv_sqrt2 = T::c(std::f64::consts::FRAC_1_SQRT_2);
    x.iter()
        .map(|&v| half * v * (T::one() + (v * inv_sqrt2).erf()))
        .collect()
}

pub fn gelu_backward<T: Scalar>(dy: &[T], x: &[T]) -> Vec<T> {
    let half = T::c(0.5);
    let inv_sqrt2 = T::c(std::f64::consts::FRAC_1_SQRT_2);
    let inv_sqrt_2pi = T::c(0.398_942_280_401_432_7);
    dy.iter()
        .zip(x)
        .map(|(&g, &v)| {
            let cdf = half * (T::one() + (v * inv_sqrt2).erf());
            let pdf = inv_sqrt_2pi * (-half * v * v).exp();
            g * (cdf + v * pdf)
        })
        .collect()
}

/// In-place numerically stable softmax over each length-`n` row.
pub fn softmax_rows<T: Scalar>(x: &mut [T], n: usize) {
    for row in x.chunks_exact_mut(n) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = T::one() / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

/// Source-index table for one axis of an `align_corners = false` bilinear resize.
#[derive(Clone, Debug)]
struct Taps<T> {
    lo: Vec<usize>,
    hi: Vec<usize>,
    w_lo: Vec<T>,
    w_hi: Vec<T>,
}

fn taps<T: Scalar>(input: usize, output: usize) -> Taps<T> {
    let scale = input as f64 / output as f64;
    let mut t = Taps {
        lo: Vec::with_capacity(output),
        hi: Vec::with_capacity(output),
        w_lo: Vec::with_capacity(output),
        w_hi: Vec::with_capacity(output),
    };
    for d in 0..output {
        let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
        let lo = (src.floor() as usize).min(input - 1);
        let hi = (lo + 1).min(input - 1);
        let frac = src - lo as f64;
        t.lo.push(lo);
        t.hi.push(hi);
        t.w_lo.push(T::c(1.0 - frac));
        t.w_hi.push(T::c(frac));
    }
    t
}

/// Bilinear resize of a channels-last map, half-pixel centres
/// (`align_corners = false`): a destination pixel `d` samples source
/// coordinate `max(0, (d + 0.5) * in / out - 0.5)`, clamped at the far edge.
pub fn resize_bilinear<T: Scalar>(
    x: &[T],
    (batch, h, w, c): (usize, usize, usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<T> {
    if (oh, ow) == (h, w) {
        return x.to_vec();
    }
    let ty = taps::<T>(h, oh);
    let tx = taps::<T>(w, ow);
    let mut y = vec![T::zero(); batch * oh * ow * c];
    for b in 0..batch {
        for oy in 0..oh {
            let (y0, y1, wy0, wy1) = (ty.lo[oy], ty.hi[oy], ty.w_lo[oy], ty.w_hi[oy]);
            for ox in 0..ow {
                let (x0, x1, wx0, wx1) = (tx.lo[ox], tx.hi[ox], tx.w_lo[ox], tx.w_hi[ox]);
                let out = &mut y[((b * oh + oy) * ow + ox) * c..][..c];
                let corners = [
                    (y0, x0, wy0 * wx0),
                    (y0, x1, wy0 * wx1),
                    (y1, x0, wy1 * wx0),
                    (y1, x1, wy1 * wx1),
                ];
                for (sy, sx, wt) in corners {
                    let src = &x[((b * h + sy) * w + sx) * c..][..c];
                    for (o, &s) in out.iter_mut().zip(src) {
                        *o += wt * s;
                    }
                }
            }
        }
    }
    y
}

/// Adjoint of [`resize_bilinear`].
pub fn resize_bilinear_backward<T: Scalar>(
    dy: &[T],
    (batch, h, w, c): (usize, usize, usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<T> {
    if (oh, ow) == (h, w) {
        return dy.to_vec();
    }
    let ty = taps::<T>(h, oh);
    let tx = taps::<T>(w, ow);
    let mut dx = vec![T::zero(); batch * h * w * c];
    for b in 0..batch {
        for oy in 0..oh {
            let (y0, y1, wy0, wy1) = (ty.lo[oy], ty.hi[oy], ty.w_lo[oy], ty.w_hi[oy]);
            for ox in 0..ow {
                let (x0, x1, wx0, wx1) = (tx.lo[ox], tx.hi[ox], tx.w_lo[ox], tx.w_hi[ox]);
                let g = &dy[((b * oh + oy) * ow + ox) * c..][..c];
                let corners = [
                    (y0, x0, wy0 * wx0),
                    (y0, x1, wy0 * wx1),
                    (y1, x0, wy1 * wx0),
                    (y1, x1, wy1 * wx1),
                ];
                for (sy, sx, wt) in corners {
                    let dst = &mut dx[((b * h + sy) * w + sx) * c..][..c];
                    for (d, &s) in dst.iter_mut().zip(g) {
                        *d += wt * s;
                    }
                }
            }
        }
    }
    dx
}

/// Channelwise concatenation of maps sharing `rows` pixels.
pub fn concat_channels<T: Scalar>(parts: &[(&[T], usize)], rows: usize) -> Vec<T> {
    let total: usize = parts.iter().map(|p| p.1).sum();
    let mut out = vec![T::zero(); rows * total];
    let mut off = 0;
    for &(data, c) in parts {
        for r in 0..rows {
            out[r * total + off..r * total + off + c].copy_from_slice(&data[r * c..(r + 1) * c]);
        }
        off += c;
    }
    out
}

/// Adjoint of [`concat_channels`].
pub fn split_channels<T: Scalar>(d: &[T], rows: usize, widths: &[usize]) -> Vec<Vec<T>> {
    let total: usize = widths.iter().sum();
    let mut off = 0;
    let mut parts = Vec::with_capacity(widths.len());
    for &c in widths {
        let mut p = vec![T::zero(); rows * c];
        for r in 0..rows {
            p[r * c..(r + 1) * c].copy_from_slice(&d[r * total + off..r * total + off + c]);
        }
        parts.push(p);
        off += c;
    }
    parts
}

pub fn add_assign<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
