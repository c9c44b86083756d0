//! Raw compute kernels over NCHW buffers. Batch items fan out through
//! [`crate::par`]; per-item weight gradients are summed in item order.

use crate::par;
use crate::real::{gemm, Real};

/// Geometry of a 2-D convolution over one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    /// Returns `None` when the kernel does not fit the padded input.
    pub fn new(channels: usize, h: usize, w: usize, kernel: usize, stride: usize, pad: usize) -> Option<Self> {
        if stride == 0 || kernel == 0 || h + 2 * pad < kernel || w + 2 * pad < kernel {
            return None;
        }
        Some(ConvGeom {
            channels,
            h,
            w,
            kernel,
            stride,
            pad,
            h_out: (h + 2 * pad - kernel) / stride + 1,
            w_out: (w + 2 * pad - kernel) / stride + 1,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.h_out * self.w_out
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds one `[C, H, W]` image into `[C*k*k, Ho*Wo]` patches.
pub fn im2col<T: Real>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let cols = g.col_cols();
    let k = g.kernel;
    for c in 0..g.channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    if iy < 0 || iy >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..][..g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patches back, accumulating into `x`.
pub fn col2im_add<T: Real>(col: &[T], g: &ConvGeom, x: &mut [T]) {
    let cols = g.col_cols();
    let k = g.kernel;
    for c in 0..g.channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut x[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] = dst[ix as usize] + src[oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}

fn add_bias<T: Real>(out: &mut [T], bias: &[T], plane: usize) {
    for (o, &b) in bias.iter().enumerate() {
        out[o * plane..(o + 1) * plane].iter_mut().for_each(|v| *v = *v + b);
    }
}

fn sum_planes<T: Real>(g: &[T], channels: usize, plane: usize, acc: &mut [T]) {
    for c in 0..channels {
        acc[c] = acc[c] + g[c * plane..(c + 1) * plane].iter().copied().sum::<T>();
    }
}

fn sum_in_order<T: Real>(parts: Vec<Vec<T>>, len: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); len];
    for p in parts {
        for (a, v) in acc.iter_mut().zip(p) {
            *a = *a + v;
        }
    }
    acc
}

/// `x: [N, C, H, W]`, `w: [O, C, k, k]` -> `[N, O, Ho, Wo]`.
pub fn conv2d_forward<T: Real>(x: &[T], n: usize, g: &ConvGeom, w: &[T], out_ch: usize, bias: Option<&[T]>) -> Vec<T> {
    let in_per = g.channels * g.h * g.w;
    let out_plane = g.col_cols();
    let mut out = vec![T::zero(); n * out_ch * out_plane];
    par::for_each_chunk_mut(&mut out, out_ch * out_plane, |i, o| {
        let xi = &x[i * in_per..(i + 1) * in_per];
        if g.is_pointwise() {
            gemm(out_ch, g.channels, out_plane, w, false, xi, false, o, false);
        } else {
            let mut col = vec![T::zero(); g.col_rows() * out_plane];
            im2col(xi, g, &mut col);
            gemm(out_ch, g.col_rows(), out_plane, w, false, &col, false, o, false);
        }
        if let Some(b) = bias {
            add_bias(o, b, out_plane);
        }
    });
    out
}

pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub fn conv2d_backward<T: Real>(
    x: &[T],
    n: usize,
    g: &ConvGeom,
    w: &[T],
    out_ch: usize,
    gout: &[T],
    need_input: bool,
) -> ConvGrads<T> {
    let in_per = g.channels * g.h * g.w;
    let out_plane = g.col_cols();
    let out_per = out_ch * out_plane;
    let wlen = out_ch * g.col_rows();
    let parts = par::map_range(n, |i| {
        let xi = &x[i * in_per..(i + 1) * in_per];
        let gi = &gout[i * out_per..(i + 1) * out_per];
        let mut gw = vec![T::zero(); wlen];
        let mut gb = vec![T::zero(); out_ch];
        sum_planes(gi, out_ch, out_plane, &mut gb);
        let mut gx = None;
        if g.is_pointwise() {
            gemm(out_ch, out_plane, g.channels, gi, false, xi, true, &mut gw, false);
            if need_input {
                let mut gxi = vec![T::zero(); in_per];
                gemm(g.channels, out_ch, out_plane, w, true, gi, false, &mut gxi, false);
                gx = Some(gxi);
            }
        } else {
            let mut col = vec![T::zero(); g.col_rows() * out_plane];
            im2col(xi, g, &mut col);
            gemm(out_ch, out_plane, g.col_rows(), gi, false, &col, true, &mut gw, false);
            if need_input {
                gemm(g.col_rows(), out_ch, out_plane, w, true, gi, false, &mut col, false);
                let mut gxi = vec![T::zero(); in_per];
                col2im_add(&col, g, &mut gxi);
                gx = Some(gxi);
            }
        }
        (gx, gw, gb)
    });
    let mut gxs = Vec::with_capacity(if need_input { n * in_per } else { 0 });
    let mut gws = Vec::with_capacity(n);
    let mut gbs = Vec::with_capacity(n);
    for (gx, gw, gb) in parts {
        if let Some(v) = gx {
            gxs.extend(v);
        }
        gws.push(gw);
        gbs.push(gb);
    }
    ConvGrads {
        input: need_input.then_some(gxs),
        weight: sum_in_order(gws, wlen),
        bias: sum_in_order(gbs, out_ch),
    }
}

/// Transposed convolution. `g` describes the *forward* convolution that maps
/// the output back to the input: `g.channels` is the output channel count,
/// `(g.h, g.w)` the output size and `(g.h_out, g.w_out)` the input size.
/// `x: [N, Cin, Hin, Win]`, `w: [Cin, Cout, k, k]`.
pub fn conv_transpose2d_forward<T: Real>(x: &[T], n: usize, in_ch: usize, g: &ConvGeom, w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let in_plane = g.col_cols();
    let in_per = in_ch * in_plane;
    let out_plane = g.h * g.w;
    let out_per = g.channels * out_plane;
    let mut out = vec![T::zero(); n * out_per];
    par::for_each_chunk_mut(&mut out, out_per, |i, o| {
        let xi = &x[i * in_per..(i + 1) * in_per];
        let mut col = vec![T::zero(); g.col_rows() * in_plane];
        gemm(g.col_rows(), in_ch, in_plane, w, true, xi, false, &mut col, false);
        col2im_add(&col, g, o);
        if let Some(b) = bias {
            add_bias(o, b, out_plane);
        }
    });
    out
}

pub fn conv_transpose2d_backward<T: Real>(
    x: &[T],
    n: usize,
    in_ch: usize,
    g: &ConvGeom,
    w: &[T],
    gout: &[T],
    need_input: bool,
) -> ConvGrads<T> {
    let in_plane = g.col_cols();
    let in_per = in_ch * in_plane;
    let out_plane = g.h * g.w;
    let out_per = g.channels * out_plane;
    let wlen = in_ch * g.col_rows();
    let parts = par::map_range(n, |i| {
        let xi = &x[i * in_per..(i + 1) * in_per];
        let gi = &gout[i * out_per..(i + 1) * out_per];
        let mut col = vec![T::zero(); g.col_rows() * in_plane];
        im2col(gi, g, &mut col);
        let mut gw = vec![T::zero(); wlen];
        gemm(in_ch, in_plane, g.col_rows(), xi, false, &col, true, &mut gw, false);
        let mut gb = vec![T::zero(); g.channels];
        sum_planes(gi, g.channels, out_plane, &mut gb);
        let gx = need_input.then(|| {
            let mut gxi = vec![T::zero(); in_per];
            gemm(in_ch, g.col_rows(), in_plane, w, false, &col, false, &mut gxi, false);
            gxi
        });
        (gx, gw, gb)
    });
    let mut gxs = Vec::new();
    let mut gws = Vec::with_capacity(n);
    let mut gbs = Vec::with_capacity(n);
    for (gx, gw, gb) in parts {
        if let Some(v) = gx {
            gxs.extend(v);
        }
        gws.push(gw);
        gbs.push(gb);
    }
    ConvGrads {
        input: need_input.then_some(gxs),
        weight: sum_in_order(gws, wlen),
        bias: sum_in_order(gbs, g.channels),
    }
}

/// Max pooling; returns values and flat argmax indices into the input.
/// Ties resolve to the first element in scan order.
pub fn maxpool_forward<T: Real>(x: &[T], n: usize, g: &ConvGeom) -> (Vec<T>, Vec<usize>) {
    let planes = n * g.channels;
    let in_plane = g.h * g.w;
    let out_plane = g.col_cols();
    let mut out = vec![T::zero(); planes * out_plane];
    let mut arg = vec![0usize; planes * out_plane];
    for p in 0..planes {
        let src = &x[p * in_plane..(p + 1) * in_plane];
        for oy in 0..g.h_out {
            for ox in 0..g.w_out {
                let mut best = T::neg_infinity();
                let mut best_i = usize::MAX;
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let idx = iy as usize * g.w + ix as usize;
                        if best_i == usize::MAX || src[idx] > best {
                            best = src[idx];
                            best_i = idx;
                        }
                    }
                }
                let o = p * out_plane + oy * g.w_out + ox;
                out[o] = best;
                arg[o] = p * in_plane + best_i;
            }
        }
    }
    (out, arg)
}

/// Per-channel statistics of a `[N, C, S]` buffer (S = spatial size).
pub fn channel_mean_var<T: Real>(x: &[T], n: usize, c: usize, s: usize) -> (Vec<T>, Vec<T>) {
    let count = T::lit((n * s) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut acc = T::zero();
        for i in 0..n {
            acc = acc + x[(i * c + ch) * s..][..s].iter().copied().sum::<T>();
        }
        let m = acc / count;
        let mut sq = T::zero();
        for i in 0..n {
            sq = sq
                + x[(i * c + ch) * s..][..s]
                    .iter()
                    .map(|&v| (v - m) * (v - m))
                    .sum::<T>();
        }
        mean[ch] = m;
        var[ch] = sq / count;
    }
    (mean, var)
}
