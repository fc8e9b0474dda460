use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::moments::precompute_stats;
use crate::nets::FeatureExtractor;
use crate::tensor::Tensor;

const WEIGHT_TOL: f64 = 1e-9;

/// A fixed map from samples to finite real vectors.
pub trait FeatureMap {
    type Input: ?Sized;
    fn width(&self) -> usize;
    fn map(&self, x: &Self::Input) -> Vec<f64>;
}

/// One-hot features on the finite domain `{0, .., size - 1}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IndicatorMap {
    pub size: usize,
}

impl FeatureMap for IndicatorMap {
    type Input = usize;

    fn width(&self) -> usize {
        self.size
    }

    fn map(&self, x: &usize) -> Vec<f64> {
        let mut v = vec![0.0; self.size];
        v[*x] = 1.0;
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IdentityMap {
    pub width: usize,
}

impl FeatureMap for IdentityMap {
    type Input = [f64];

    fn width(&self) -> usize {
        self.width
    }

    fn map(&self, x: &[f64]) -> Vec<f64> {
        x.to_vec()
    }
}

/// Weighted support points.
#[derive(Clone, Debug, PartialEq)]
pub struct EmpiricalDistribution<X> {
    points: Vec<X>,
    weights: Vec<f64>,
}

impl<X> EmpiricalDistribution<X> {
    /// Weights must be nonnegative and sum to one within `1e-9`.
    pub fn new(points: Vec<X>, weights: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyData);
        }
        if points.len() != weights.len() {
            return Err(Error::Distribution(alloc::format!(
                "{} points but {} weights",
                points.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Distribution("weights must be finite and nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_TOL {
            return Err(Error::Distribution(alloc::format!("weights sum to {total}")));
        }
        Ok(Self { points, weights })
    }

    pub fn uniform(points: Vec<X>) -> Result<Self> {
        let n = points.len();
        Self::new(points, vec![1.0 / n.max(1) as f64; n])
    }

    pub fn points(&self) -> &[X] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// `E_p Φ`.
pub fn mean_embedding<X, F>(p: &EmpiricalDistribution<X>, phi: &F) -> Vec<f64>
where
    X: core::borrow::Borrow<F::Input>,
    F: FeatureMap,
{
    let mut acc = vec![0.0; phi.width()];
    for (x, &w) in p.points.iter().zip(&p.weights) {
        if w == 0.0 {
            continue;
        }
        for (a, f) in acc.iter_mut().zip(phi.map(x.borrow())) {
            *a += w * f;
        }
    }
    acc
}

/// `MMD²(K_Φ, p, q) = ‖E_p Φ − E_q Φ‖²`.
pub fn mmd_kphi<X, F>(p: &EmpiricalDistribution<X>, q: &EmpiricalDistribution<X>, phi: &F) -> f64
where
    X: core::borrow::Borrow<F::Input>,
    F: FeatureMap,
{
    let a = mean_embedding(p, phi);
    let b = mean_embedding(q, phi);
    a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// MMD² between two image sets under the concatenated first `m` taps of an
/// extractor, each set weighted uniformly.
pub fn feature_mmd(a: &Tensor, b: &Tensor, extractor: &FeatureExtractor, m: usize, chunk: usize) -> Result<f64> {
    let sa = precompute_stats(a, extractor, m, chunk)?;
    let sb = precompute_stats(b, extractor, m, chunk)?;
    Ok(sa
        .layers
        .iter()
        .zip(&sb.layers)
        .flat_map(|(x, y)| x.mean.iter().zip(&y.mean))
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn point_masses_on_the_line() {
        let phi = IdentityMap { width: 1 };
        let p = EmpiricalDistribution::new(vec![vec![0.0]], vec![1.0]).unwrap();
        let q = EmpiricalDistribution::new(vec![vec![2.0]], vec![1.0]).unwrap();
        assert_eq!(mmd_kphi(&p, &q, &phi), 4.0);
        assert_eq!(mmd_kphi(&p, &p, &phi), 0.0);
    }

    #[test]
    fn weights_are_validated() {
        assert!(EmpiricalDistribution::new(vec![0usize, 1], vec![0.5, 0.6]).is_err());
        assert!(EmpiricalDistribution::new(vec![0usize, 1], vec![1.5, -0.5]).is_err());
        assert!(EmpiricalDistribution::new(vec![0usize], vec![1.0, 0.0]).is_err());
        assert!(EmpiricalDistribution::<usize>::new(vec![], vec![]).is_err());
    }

    #[test]
    fn indicator_embedding_is_the_weight_vector() {
        let p = EmpiricalDistribution::new(vec![0usize, 2, 1], vec![0.25, 0.5, 0.25]).unwrap();
        assert_eq!(mean_embedding(&p, &IndicatorMap { size: 3 }), vec![0.25, 0.25, 0.5]);
    }
}
