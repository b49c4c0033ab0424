//! Forward and adjoint kernels on raw row-major buffers.
//!
//! Everything here is single-threaded with a fixed accumulation order, so
//! identical inputs give bit-identical outputs.

use crate::numerics::Scalar;

pub const NORM_EPS: f64 = 1e-5;

/// Geometry of a `[C, H, W]` convolution with a square `k x k` kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }
}

/// Unrolls input patches into a `[c_in*k*k, out_h*out_w]` matrix.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeometry) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let n_out = oh * ow;
    let mut cols = vec![T::zero(); g.patch_len() * n_out];
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * n_out..(row + 1) * n_out];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * ow + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeometry, dx: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let n_out = oh * ow;
    for c in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * n_out..(row + 1) * n_out];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = c * g.h * g.w + iy as usize * g.w;
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dx[base + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation. Returns the output and the unrolled patches kept for the adjoint.
pub fn conv2d_forward<T: Scalar>(
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    c_out: usize,
    g: &ConvGeometry,
) -> (Vec<T>, Vec<T>) {
    let n_out = g.out_h() * g.out_w();
    let cols = im2col(x, g);
    let mut out = vec![T::zero(); c_out * n_out];
    if let Some(b) = bias {
        for (o, row) in out.chunks_mut(n_out).enumerate() {
            row.fill(b[o]);
        }
    }
    let beta = if bias.is_some() { T::one() } else { T::zero() };
    T::gemm(
        c_out,
        g.patch_len(),
        n_out,
        T::one(),
        weight,
        false,
        &cols,
        false,
        beta,
        &mut out,
    );
    (out, cols)
}

/// Accumulates input, weight and bias gradients of [`conv2d_forward`].
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    dy: &[T],
    weight: &[T],
    cols: &[T],
    c_out: usize,
    g: &ConvGeometry,
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let n_out = g.out_h() * g.out_w();
    let p = g.patch_len();
    if let Some(dw) = dw {
        T::gemm(
            c_out,
            n_out,
            p,
            T::one(),
            dy,
            false,
            cols,
            true,
            T::one(),
            dw,
        );
    }
    if let Some(db) = db {
        for (o, row) in dy.chunks(n_out).enumerate() {
            db[o] += row.iter().copied().sum::<T>();
        }
    }
    if let Some(dx) = dx {
        let mut dcols = vec![T::zero(); p * n_out];
        T::gemm(
            p,
            c_out,
            n_out,
            T::one(),
            weight,
            true,
            dy,
            false,
            T::zero(),
            &mut dcols,
        );
        col2im(&dcols, g, dx);
    }
}

/// 2x2 max pooling with stride 2; odd trailing rows/cols are dropped.
/// Returns the output and the flat input index of each selected maximum.
pub fn max_pool2<T: Scalar>(x: &[T], c: usize, h: usize, w: usize) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = ch * h * w + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = ch * h * w + (2 * oy + dy) * w + 2 * ox + dx;
                    // strict comparison: ties keep the first index in scan order
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

/// Nearest-neighbour x2 upsampling.
pub fn upsample_nearest2<T: Scalar>(x: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                out[(ch * oh + oy) * ow + ox] = x[(ch * h + oy / 2) * w + ox / 2];
            }
        }
    }
    out
}

pub fn upsample_nearest2_backward<T: Scalar>(dy: &[T], c: usize, h: usize, w: usize, dx: &mut [T]) {
    let (oh, ow) = (2 * h, 2 * w);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                dx[(ch * h + oy / 2) * w + ox / 2] += dy[(ch * oh + oy) * ow + ox];
            }
        }
    }
}

/// Interpolation taps along one axis under the half-pixel-centre convention.
#[derive(Debug, Clone, Copy)]
pub struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

pub fn bilinear_taps(src: usize, dst: usize) -> Vec<Tap> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            let frac = if lo == hi { 0.0 } else { pos - lo as f64 };
            Tap { lo, hi, frac }
        })
        .collect()
}

pub fn bilinear_resize<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<T> {
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for yt in &ty {
            let fy = T::from_f64_lossy(yt.frac);
            for xt in &tx {
                let fx = T::from_f64_lossy(xt.frac);
                let top =
                    plane[yt.lo * w + xt.lo] * (T::one() - fx) + plane[yt.lo * w + xt.hi] * fx;
                let bot =
                    plane[yt.hi * w + xt.lo] * (T::one() - fx) + plane[yt.hi * w + xt.hi] * fx;
                out.push(top * (T::one() - fy) + bot * fy);
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn bilinear_resize_backward<T: Scalar>(
    dy: &[T],
    c: usize,
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
    dx: &mut [T],
) {
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let mut i = 0;
    for ch in 0..c {
        let base = ch * h * w;
        for yt in &ty {
            let fy = T::from_f64_lossy(yt.frac);
            for xt in &tx {
                let fx = T::from_f64_lossy(xt.frac);
                let g = dy[i];
                i += 1;
                dx[base + yt.lo * w + xt.lo] += g * (T::one() - fy) * (T::one() - fx);
                dx[base + yt.lo * w + xt.hi] += g * (T::one() - fy) * fx;
                dx[base + yt.hi * w + xt.lo] += g * fy * (T::one() - fx);
                dx[base + yt.hi * w + xt.hi] += g * fy * fx;
            }
        }
    }
}

/// Per-channel normalisation over the spatial extent.
/// Returns `(y, x_hat, inv_std)`.
pub fn instance_norm<T: Scalar>(
    x: &[T],
    c: usize,
    hw: usize,
    gamma: &[T],
    beta: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let eps = T::from_f64_lossy(NORM_EPS);
    let n = T::from_usize(hw).unwrap();
    let mut y = vec![T::zero(); c * hw];
    let mut xhat = vec![T::zero(); c * hw];
    let mut inv_std = vec![T::zero(); c];
    for ch in 0..c {
        let xs = &x[ch * hw..(ch + 1) * hw];
        let mean = xs.iter().copied().sum::<T>() / n;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv = T::one() / (var + eps).sqrt();
        inv_std[ch] = inv;
        for i in 0..hw {
            let xh = (xs[i] - mean) * inv;
            xhat[ch * hw + i] = xh;
            y[ch * hw + i] = gamma[ch] * xh + beta[ch];
        }
    }
    (y, xhat, inv_std)
}

#[allow(clippy::too_many_arguments)]
pub fn instance_norm_backward<T: Scalar>(
    dy: &[T],
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
    c: usize,
    hw: usize,
    dx: Option<&mut [T]>,
    dgamma: Option<&mut [T]>,
    dbeta: Option<&mut [T]>,
) {
    let n = T::from_usize(hw).unwrap();
    let mut sum_dy = vec![T::zero(); c];
    let mut sum_dy_xhat = vec![T::zero(); c];
    for ch in 0..c {
        for i in 0..hw {
            let g = dy[ch * hw + i];
            sum_dy[ch] += g;
            sum_dy_xhat[ch] += g * xhat[ch * hw + i];
        }
    }
    if let Some(dg) = dgamma {
        for ch in 0..c {
            dg[ch] += sum_dy_xhat[ch];
        }
    }
    if let Some(db) = dbeta {
        for ch in 0..c {
            db[ch] += sum_dy[ch];
        }
    }
    if let Some(dx) = dx {
        for ch in 0..c {
            let k = gamma[ch] * inv_std[ch] / n;
            for i in 0..hw {
                let j = ch * hw + i;
                dx[j] += k * (n * dy[j] - sum_dy[ch] - xhat[j] * sum_dy_xhat[ch]);
            }
        }
    }
}


/// Normalised 1-D Gaussian taps, radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur of `[c,h,w]` with edge replication, accumulated in f64.
pub fn gaussian_blur<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, sigma: f64) -> Vec<T> {
    if sigma <= 0.0 {
        return x.to_vec();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let mut tmp = vec![0.0f64; x.len()];
    let mut out = vec![T::zero(); x.len()];
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..h {
            for xo in 0..w {
                let mut s = 0.0;
                for (i, &kv) in k.iter().enumerate() {
                    let xx = (xo as i64 + i as i64 - r).clamp(0, w as i64 - 1) as usize;
                    s += kv * x[base + y * w + xx].to_f64_lossy();
                }
                tmp[base + y * w + xo] = s;
            }
        }
        for y in 0..h {
            for xo in 0..w {
                let mut s = 0.0;
                for (i, &kv) in k.iter().enumerate() {
                    let yy = (y as i64 + i as i64 - r).clamp(0, h as i64 - 1) as usize;
                    s += kv * tmp[base + yy * w + xo];
                }
                out[base + y * w + xo] = T::from_f64_lossy(s);
            }
        }
    }
    out
}
