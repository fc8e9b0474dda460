//! Laplacian pyramid over single image planes.
//!
//! Blur uses the 5-tap binomial kernel `[1, 4, 6, 4, 1] / 16` with
//! clamp-to-edge borders. A pyramid of depth `D` has `D` band-pass levels
//! followed by the low-pass residual, so it holds `D + 1` levels in total.
//! `D = floor(log2(min(h, w))) - 1`.

use alloc::vec;
use alloc::vec::Vec;

const BINOMIAL: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

/// A linear map `R^n -> R^m` stored as sparse rows.
#[derive(Clone, Debug)]
struct Resample1d {
    input: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl Resample1d {
    /// Blur then decimate by two.
    fn down(n: usize) -> Self {
        let m = n.div_ceil(2);
        let rows = (0..m)
            .map(|i| {
                let mut row: Vec<(usize, f64)> = Vec::with_capacity(5);
                for (k, &wk) in BINOMIAL.iter().enumerate() {
                    let src = (2 * i + k) as isize - 2;
                    let src = src.clamp(0, n as isize - 1) as usize;
                    match row.iter_mut().find(|(j, _)| *j == src) {
                        Some(e) => e.1 += wk,
                        None => row.push((src, wk)),
                    }
                }
                row
            })
            .collect();
        Self { input: n, rows }
    }

    /// Zero-insert then blur, rows renormalised so constants map to constants.
    fn up(m: usize, n: usize) -> Self {
        let rows = (0..n)
            .map(|i| {
                let mut row: Vec<(usize, f64)> = (0..m)
                    .filter_map(|p| {
                        let k = i as isize - 2 * p as isize + 2;
                        (0..5).contains(&k).then(|| (p, BINOMIAL[k as usize]))
                    })
                    .collect();
                let total: f64 = row.iter().map(|e| e.1).sum();
                row.iter_mut().for_each(|e| e.1 /= total);
                row
            })
            .collect();
        Self { input: m, rows }
    }

    fn output(&self) -> usize {
        self.rows.len()
    }

    fn apply(&self, x: &[f64], stride: usize, out: &mut [f64], out_stride: usize) {
        for (i, row) in self.rows.iter().enumerate() {
            out[i * out_stride] = row.iter().map(|&(j, w)| w * x[j * stride]).sum();
        }
    }

    fn apply_t(&self, y: &[f64], stride: usize, out: &mut [f64], out_stride: usize) {
        for j in 0..self.input {
            out[j * out_stride] = 0.0;
        }
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, w) in row {
                out[j * out_stride] += w * y[i * stride];
            }
        }
    }
}

/// Separable 2-D operator `rows ⊗ cols` acting on `h × w` planes.
#[derive(Clone, Debug)]
struct Resample2d {
    vertical: Resample1d,
    horizontal: Resample1d,
}

impl Resample2d {
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let (h, w) = (self.vertical.input, self.horizontal.input);
        let (oh, ow) = (self.vertical.output(), self.horizontal.output());
        let mut tmp = vec![0.0; h * ow];
        for r in 0..h {
            self.horizontal
                .apply(&x[r * w..], 1, &mut tmp[r * ow..], 1);
        }
        let mut out = vec![0.0; oh * ow];
        for c in 0..ow {
            self.vertical.apply(&tmp[c..], ow, &mut out[c..], ow);
        }
        out
    }

    fn apply_t(&self, y: &[f64]) -> Vec<f64> {
        let (h, w) = (self.vertical.input, self.horizontal.input);
        let ow = self.horizontal.output();
        let mut tmp = vec![0.0; h * ow];
        for c in 0..ow {
            self.vertical.apply_t(&y[c..], ow, &mut tmp[c..], ow);
        }
        let mut out = vec![0.0; h * w];
        for r in 0..h {
            self.horizontal
                .apply_t(&tmp[r * ow..], 1, &mut out[r * w..], 1);
        }
        out
    }
}

/// Number of band-pass levels for an `h × w` plane. Requires `min(h, w) >= 4`.
pub fn pyramid_depth(h: usize, w: usize) -> usize {
    let m = h.min(w);
    assert!(m >= 4, "pyramid needs planes of at least 4x4");
    (usize::BITS - 1 - m.leading_zeros()) as usize - 1
}

/// Precomputed down/up operators for a fixed plane size.
#[derive(Clone, Debug)]
pub struct LaplacianPyramid {
    height: usize,
    width: usize,
    down: Vec<Resample2d>,
    up: Vec<Resample2d>,
}

impl LaplacianPyramid {
    pub fn new(height: usize, width: usize) -> Self {
        let depth = pyramid_depth(height, width);
        let (mut h, mut w) = (height, width);
        let mut down = Vec::with_capacity(depth);
        let mut up = Vec::with_capacity(depth);
        for _ in 0..depth {
            let d = Resample2d {
                vertical: Resample1d::down(h),
                horizontal: Resample1d::down(w),
            };
            let (nh, nw) = (d.vertical.output(), d.horizontal.output());
            up.push(Resample2d {
                vertical: Resample1d::up(nh, h),
                horizontal: Resample1d::up(nw, w),
            });
            down.push(d);
            h = nh;
            w = nw;
        }
        Self {
            height,
            width,
            down,
            up,
        }
    }

    pub fn depth(&self) -> usize {
        self.down.len()
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    /// Band-pass levels `0..depth` followed by the low-pass residual.
    pub fn analyze(&self, plane: &[f64]) -> Vec<Vec<f64>> {
        assert_eq!(plane.len(), self.plane_len());
        let mut levels = Vec::with_capacity(self.depth() + 1);
        let mut current = plane.to_vec();
        for (down, up) in self.down.iter().zip(&self.up) {
            let coarse = down.apply(&current);
            let predicted = up.apply(&coarse);
            let band = current.iter().zip(&predicted).map(|(a, b)| a - b).collect();
            levels.push(band);
            current = coarse;
        }
        levels.push(current);
        levels
    }

    /// Adjoint of [`analyze`](Self::analyze): maps per-level cotangents back
    /// to a plane cotangent.
    pub fn analyze_adjoint(&self, level_grads: &[Vec<f64>]) -> Vec<f64> {
        let depth = self.depth();
        assert_eq!(level_grads.len(), depth + 1);
        // Cotangent of the Gaussian level g_j, built from the coarsest level up.
        let mut adj = level_grads[depth].clone();
        for j in (0..depth).rev() {
            // g_{j+1} also feeds L_j through the upsampler.
            let up_t = self.up[j].apply_t(&level_grads[j]);
            adj.iter_mut().zip(&up_t).for_each(|(a, u)| *a -= u);
            let mut next = self.down[j].apply_t(&adj);
            next.iter_mut()
                .zip(&level_grads[j])
                .for_each(|(a, g)| *a += g);
            adj = next;
        }
        adj
    }
}

/// Per-level weights `2^{-2j}`.
pub fn level_weight(j: usize) -> f64 {
    libm::ldexp(1.0, -2 * j as i32)
}
