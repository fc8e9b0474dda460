use alloc::vec;
use alloc::vec::Vec;

use super::linalg::{matmul_sq, sym_eigen, sym_sqrt};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const SYMMETRY_TOL: f64 = 1e-9;

/// Mean and full covariance (row-major `dim × dim`).
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    mean: Vec<f64>,
    cov: Vec<f64>,
}

impl GaussianStats {
    pub fn new(mean: Vec<f64>, cov: Vec<f64>) -> Result<Self> {
        let d = mean.len();
        if d == 0 {
            return Err(Error::ZeroDim(vec![0]));
        }
        if cov.len() != d * d {
            return Err(Error::BadLength {
                shape: vec![d, d],
                len: cov.len(),
            });
        }
        for i in 0..d {
            for j in 0..i {
                let (a, b) = (cov[i * d + j], cov[j * d + i]);
                if (a - b).abs() > SYMMETRY_TOL * a.abs().max(b.abs()).max(1.0) {
                    return Err(Error::Distribution("covariance is not symmetric".into()));
                }
            }
        }
        Ok(Self { mean, cov })
    }

    /// Sample mean and unbiased covariance of the rows of `[N, d]` features.
    pub fn from_features(x: &Tensor) -> Result<Self> {
        let mut acc = GaussianAccumulator::new(x.shape().get(1).copied().unwrap_or(0));
        acc.push(x)?;
        acc.finish()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn cov(&self) -> &[f64] {
        &self.cov
    }
}

/// Streaming sums for [`GaussianStats`].
#[derive(Clone, Debug)]
pub struct GaussianAccumulator {
    dim: usize,
    count: u64,
    sum: Vec<f64>,
    outer: Vec<f64>,
}

impl GaussianAccumulator {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            count: 0,
            sum: vec![0.0; dim],
            outer: vec![0.0; dim * dim],
        }
    }

    pub fn push(&mut self, x: &Tensor) -> Result<()> {
        let d = self.dim;
        if x.rank() != 2 || x.shape()[1] != d {
            return Err(Error::WidthMismatch {
                layer: 0,
                expected: d,
                actual: x.shape().get(1).copied().unwrap_or(0),
            });
        }
        for row in x.data().chunks_exact(d) {
            let row: Vec<f64> = row.iter().map(|&v| v as f64).collect();
            for i in 0..d {
                self.sum[i] += row[i];
                for j in 0..d {
                    self.outer[i * d + j] += row[i] * row[j];
                }
            }
            self.count += 1;
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<GaussianStats> {
        if self.count == 0 {
            return Err(Error::EmptyData);
        }
        let n = self.count as f64;
        let d = self.dim;
        let mean: Vec<f64> = self.sum.iter().map(|s| s / n).collect();
        let denom = if self.count > 1 { n - 1.0 } else { 1.0 };
        let mut cov = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..=i {
                let c = (self.outer[i * d + j] - n * mean[i] * mean[j]) / denom;
                let c = if i == j { c.max(0.0) } else { c };
                cov[i * d + j] = c;
                cov[j * d + i] = c;
            }
        }
        GaussianStats::new(mean, cov)
    }
}

/// `‖μa − μb‖² + tr(Σa + Σb − 2 (Σa Σb)^½)`, clamped at zero.
///
/// The trace of the square root is taken from the eigenvalues of the
/// symmetric matrix `Σa^½ Σb Σa^½`, which shares its spectrum with `Σa Σb`.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    let d = a.dim();
    if b.dim() != d {
        return Err(Error::WidthMismatch {
            layer: 0,
            expected: d,
            actual: b.dim(),
        });
    }
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    let trace = |m: &[f64]| (0..d).map(|i| m[i * d + i]).sum::<f64>();
    let root_a = sym_sqrt(&a.cov, d)?;
    let inner = matmul_sq(&matmul_sq(&root_a, &b.cov, d), &root_a, d);
    let cross: f64 = sym_eigen(&inner, d)?.values.iter().map(|&l| libm::sqrt(l.max(0.0))).sum();
    Ok((mean_term + trace(&a.cov) + trace(&b.cov) - 2.0 * cross).max(0.0))
}
