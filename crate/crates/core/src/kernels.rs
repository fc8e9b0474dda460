//! Raw loops behind the graph primitives. Inner products accumulate in `f64`.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::Element;

/// Geometry of a 2-D (transposed) convolution over NCHW data.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

/// Output extent of a convolution, or `None` if the window does not fit.
pub fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

pub fn conv_transpose_out_len(
    input: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Option<usize> {
    let full = (input - 1) * stride + kernel;
    if stride == 0 || full <= 2 * pad {
        return None;
    }
    Some(full - 2 * pad)
}

#[inline]
fn tap(o: usize, k: usize, stride: usize, pad: usize, len: usize) -> Option<usize> {
    let pos = (o * stride + k) as isize - pad as isize;
    (pos >= 0 && (pos as usize) < len).then_some(pos as usize)
}

pub fn matmul<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(m * n);
    let mut row = vec![0.0f64; n];
    for i in 0..m {
        row.iter_mut().for_each(|r| *r = 0.0);
        for p in 0..k {
            let av = a[i * k + p].as_f64();
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (r, &bv) in row.iter_mut().zip(brow) {
                *r += av * bv.as_f64();
            }
        }
        out.extend(row.iter().map(|&r| T::from_f64(r)));
    }
    out
}

/// `a^T b` for `a: [k, m]`, `b: [k, n]`.
pub fn matmul_tn<T: Element>(a: &[T], b: &[T], k: usize, m: usize, n: usize) -> Vec<T> {
    let mut acc = vec![0.0f64; m * n];
    for p in 0..k {
        for i in 0..m {
            let av = a[p * m + i].as_f64();
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut acc[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv.as_f64();
            }
        }
    }
    acc.into_iter().map(T::from_f64).collect()
}

/// `a b^T` for `a: [m, k]`, `b: [n, k]`.
pub fn matmul_nt<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let s: f64 = arow
                .iter()
                .zip(brow)
                .map(|(&x, &y)| x.as_f64() * y.as_f64())
                .sum();
            out.push(T::from_f64(s));
        }
    }
    out
}

pub fn conv2d<T: Element>(x: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let k = g.kernel;
    let mut out = Vec::with_capacity(g.batch * g.out_ch * g.out_h * g.out_w);
    for n in 0..g.batch {
        for co in 0..g.out_ch {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let mut acc = 0.0f64;
                    for ci in 0..g.in_ch {
                        let xb = (n * g.in_ch + ci) * g.in_h * g.in_w;
                        let wb = (co * g.in_ch + ci) * k * k;
                        for ky in 0..k {
                            let Some(iy) = tap(oy, ky, g.stride, g.pad, g.in_h) else {
                                continue;
                            };
                            for kx in 0..k {
                                let Some(ix) = tap(ox, kx, g.stride, g.pad, g.in_w) else {
                                    continue;
                                };
                                acc += x[xb + iy * g.in_w + ix].as_f64()
                                    * w[wb + ky * k + kx].as_f64();
                            }
                        }
                    }
                    out.push(T::from_f64(acc));
                }
            }
        }
    }
    out
}

/// Gradients of [`conv2d`] with respect to input and weight.
pub fn conv2d_backward<T: Element>(
    x: &[T],
    w: &[T],
    dy: &[T],
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let k = g.kernel;
    let mut dx = need_dx.then(|| vec![0.0f64; x.len()]);
    let mut dw = need_dw.then(|| vec![0.0f64; w.len()]);
    for n in 0..g.batch {
        for co in 0..g.out_ch {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let gy = dy[((n * g.out_ch + co) * g.out_h + oy) * g.out_w + ox].as_f64();
                    if gy == 0.0 {
                        continue;
                    }
                    for ci in 0..g.in_ch {
                        let xb = (n * g.in_ch + ci) * g.in_h * g.in_w;
                        let wb = (co * g.in_ch + ci) * k * k;
                        for ky in 0..k {
                            let Some(iy) = tap(oy, ky, g.stride, g.pad, g.in_h) else {
                                continue;
                            };
                            for kx in 0..k {
                                let Some(ix) = tap(ox, kx, g.stride, g.pad, g.in_w) else {
                                    continue;
                                };
                                let xi = xb + iy * g.in_w + ix;
                                let wi = wb + ky * k + kx;
                                if let Some(dx) = dx.as_mut() {
                                    dx[xi] += gy * w[wi].as_f64();
                                }
                                if let Some(dw) = dw.as_mut() {
                                    dw[wi] += gy * x[xi].as_f64();
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (
        dx.map(|v| v.into_iter().map(T::from_f64).collect()),
        dw.map(|v| v.into_iter().map(T::from_f64).collect()),
    )
}

/// Transposed convolution; weight layout `[in_ch, out_ch, k, k]`.
pub fn conv_transpose2d<T: Element>(x: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let k = g.kernel;
    let mut acc = vec![0.0f64; g.batch * g.out_ch * g.out_h * g.out_w];
    for n in 0..g.batch {
        for ci in 0..g.in_ch {
            for iy in 0..g.in_h {
                for ix in 0..g.in_w {
                    let xv = x[((n * g.in_ch + ci) * g.in_h + iy) * g.in_w + ix].as_f64();
                    if xv == 0.0 {
                        continue;
                    }
                    for co in 0..g.out_ch {
                        let wb = (ci * g.out_ch + co) * k * k;
                        let ob = (n * g.out_ch + co) * g.out_h * g.out_w;
                        for ky in 0..k {
                            let Some(oy) = tap(iy, ky, g.stride, g.pad, g.out_h) else {
                                continue;
                            };
                            for kx in 0..k {
                                let Some(ox) = tap(ix, kx, g.stride, g.pad, g.out_w) else {
                                    continue;
                                };
                                acc[ob + oy * g.out_w + ox] += xv * w[wb + ky * k + kx].as_f64();
                            }
                        }
                    }
                }
            }
        }
    }
    acc.into_iter().map(T::from_f64).collect()
}

pub fn conv_transpose2d_backward<T: Element>(
    x: &[T],
    w: &[T],
    dy: &[T],
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let k = g.kernel;
    let mut dx = need_dx.then(|| Vec::with_capacity(x.len()));
    let mut dw = need_dw.then(|| vec![0.0f64; w.len()]);
    for n in 0..g.batch {
        for ci in 0..g.in_ch {
            for iy in 0..g.in_h {
                for ix in 0..g.in_w {
                    let xv = x[((n * g.in_ch + ci) * g.in_h + iy) * g.in_w + ix].as_f64();
                    let mut gx = 0.0f64;
                    for co in 0..g.out_ch {
                        let wb = (ci * g.out_ch + co) * k * k;
                        let ob = (n * g.out_ch + co) * g.out_h * g.out_w;
                        for ky in 0..k {
                            let Some(oy) = tap(iy, ky, g.stride, g.pad, g.out_h) else {
                                continue;
                            };
                            for kx in 0..k {
                                let Some(ox) = tap(ix, kx, g.stride, g.pad, g.out_w) else {
                                    continue;
                                };
                                let gy = dy[ob + oy * g.out_w + ox].as_f64();
                                gx += gy * w[wb + ky * k + kx].as_f64();
                                if let Some(dw) = dw.as_mut() {
                                    dw[wb + ky * k + kx] += gy * xv;
                                }
                            }
                        }
                    }
                    if let Some(dx) = dx.as_mut() {
                        dx.push(T::from_f64(gx));
                    }
                }
            }
        }
    }
    (dx, dw.map(|v| v.into_iter().map(T::from_f64).collect()))
}

/// Splits a `[N, C, ...]` shape into `(N, C, inner)`.
pub fn channel_layout(shape: &[usize]) -> (usize, usize, usize) {
    let inner = shape[2..].iter().product();
    (shape[0], shape[1], inner)
}
