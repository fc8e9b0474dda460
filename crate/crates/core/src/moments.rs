//! Feature moments of real and generated data.
//!
//! Real-data statistics are accumulated once in f64 over the whole dataset;
//! generated-batch statistics are recomputed every step, either as plain
//! values or as graph nodes that gradients can flow through.

use alloc::vec;
use alloc::vec::Vec;

use crate::ama::sum_terms;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::nets::FeatureExtractor;
use crate::tensor::Tensor;

/// Per-feature mean and (optionally) variance of one tap.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerMoments {
    pub mean: Vec<f32>,
    pub var: Option<Vec<f32>>,
}

impl LayerMoments {
    pub fn width(&self) -> usize {
        self.mean.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MomentStats {
    pub layers: Vec<LayerMoments>,
    /// Number of samples the moments were computed from.
    pub count: u64,
    /// Fingerprint of the extractor that produced the features.
    pub fingerprint: u64,
}

impl MomentStats {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn widths(&self) -> Vec<usize> {
        self.layers.iter().map(LayerMoments::width).collect()
    }

    pub fn has_var(&self) -> bool {
        self.layers.iter().all(|l| l.var.is_some())
    }

    /// Keeps the first `m` layers.
    pub fn truncate(&self, m: usize) -> Result<Self> {
        if m < 1 || m > self.layers.len() {
            return Err(Error::LayerCount {
                requested: m,
                available: self.layers.len(),
            });
        }
        Ok(Self {
            layers: self.layers[..m].to_vec(),
            ..self.clone()
        })
    }

    /// Drops the variance track.
    pub fn mean_only(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| LayerMoments {
                    mean: l.mean.clone(),
                    var: None,
                })
                .collect(),
            ..self.clone()
        }
    }

    /// Errors unless these statistics were produced by `extractor`.
    pub fn check_extractor(&self, extractor: &FeatureExtractor) -> Result<()> {
        let fp = extractor.fingerprint();
        if fp != self.fingerprint {
            return Err(Error::Fingerprint {
                stats: self.fingerprint,
                extractor: fp,
            });
        }
        let have = extractor.tap_widths();
        for (j, l) in self.layers.iter().enumerate() {
            match have.get(j) {
                Some(&w) if w == l.width() => {}
                Some(&w) => {
                    return Err(Error::WidthMismatch {
                        layer: j,
                        expected: l.width(),
                        actual: w,
                    })
                }
                None => {
                    return Err(Error::LayerCount {
                        requested: self.layers.len(),
                        available: have.len(),
                    })
                }
            }
        }
        Ok(())
    }
}

/// `Δ_j = μ_real,j − μ̂_j` per layer, and the same for variances.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentDelta {
    pub mean: Vec<Vec<f32>>,
    pub var: Option<Vec<Vec<f32>>>,
}

/// Streaming f64 sums of features and squared features.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentAccumulator {
    sum: Vec<Vec<f64>>,
    sq: Vec<Vec<f64>>,
    count: u64,
}

impl MomentAccumulator {
    pub fn new(widths: &[usize]) -> Self {
        Self {
            sum: widths.iter().map(|&w| vec![0.0; w]).collect(),
            sq: widths.iter().map(|&w| vec![0.0; w]).collect(),
            count: 0,
        }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    /// Adds a chunk: one `[N, d_j]` matrix per layer.
    pub fn push(&mut self, features: &[Tensor]) -> Result<()> {
        if features.len() != self.sum.len() {
            return Err(Error::LayerCount {
                requested: self.sum.len(),
                available: features.len(),
            });
        }
        let rows = features.first().map_or(0, |f| f.shape()[0]);
        for (j, f) in features.iter().enumerate() {
            let d = self.sum[j].len();
            if f.rank() != 2 || f.shape()[1] != d || f.shape()[0] != rows {
                return Err(Error::WidthMismatch {
                    layer: j,
                    expected: d,
                    actual: f.shape().get(1).copied().unwrap_or(0),
                });
            }
            for row in f.data().chunks_exact(d) {
                for ((s, q), &x) in self.sum[j].iter_mut().zip(self.sq[j].iter_mut()).zip(row) {
                    let x = x as f64;
                    *s += x;
                    *q += x * x;
                }
            }
        }
        self.count += rows as u64;
        Ok(())
    }

    /// Folds `other` into `self`; merge order is fixed by the caller.
    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if self.sum.len() != other.sum.len() {
            return Err(Error::LayerCount {
                requested: self.sum.len(),
                available: other.sum.len(),
            });
        }
        for j in 0..self.sum.len() {
            if self.sum[j].len() != other.sum[j].len() {
                return Err(Error::WidthMismatch {
                    layer: j,
                    expected: self.sum[j].len(),
                    actual: other.sum[j].len(),
                });
            }
            self.sum[j].iter_mut().zip(&other.sum[j]).for_each(|(a, b)| *a += b);
            self.sq[j].iter_mut().zip(&other.sq[j]).for_each(|(a, b)| *a += b);
        }
        self.count += other.count;
        Ok(())
    }

    /// Means and clamped variances `E[x²] − μ²`.
    pub fn finish(&self, with_var: bool, fingerprint: u64) -> Result<MomentStats> {
        if self.count == 0 {
            return Err(Error::EmptyData);
        }
        let n = self.count as f64;
        let layers = self
            .sum
            .iter()
            .zip(&self.sq)
            .map(|(s, q)| {
                let mean: Vec<f64> = s.iter().map(|v| v / n).collect();
                let var = with_var.then(|| {
                    q.iter()
                        .zip(&mean)
                        .map(|(q, m)| (q / n - m * m).max(0.0) as f32)
                        .collect()
                });
                LayerMoments {
                    mean: mean.into_iter().map(|v| v as f32).collect(),
                    var,
                }
            })
            .collect();
        Ok(MomentStats {
            layers,
            count: self.count,
            fingerprint,
        })
    }
}

/// Moments of the first `m` taps over all of `data`, processed `chunk` rows
/// at a time.
pub fn precompute_stats(
    data: &Tensor,
    extractor: &FeatureExtractor,
    m: usize,
    chunk: usize,
) -> Result<MomentStats> {
    extractor.check_layers(m)?;
    let rows = data.shape().first().copied().unwrap_or(0);
    if rows == 0 {
        return Err(Error::EmptyData);
    }
    let chunk = chunk.max(1);
    let mut acc = MomentAccumulator::new(&extractor.tap_widths()[..m]);
    let mut start = 0;
    while start < rows {
        let end = (start + chunk).min(rows);
        acc.push(&extractor.extract(&data.slice_rows(start, end)?, m)?)?;
        start = end;
    }
    acc.finish(true, extractor.fingerprint())
}

/// Moments of a single generated batch.
pub fn batch_stats(
    fake: &Tensor,
    extractor: &FeatureExtractor,
    m: usize,
    with_var: bool,
) -> Result<MomentStats> {
    let rows = fake.shape().first().copied().unwrap_or(0);
    if with_var && rows < 2 {
        return Err(Error::BatchTooSmall(rows));
    }
    let mut acc = MomentAccumulator::new(&extractor.tap_widths()[..m.min(extractor.num_taps())]);
    acc.push(&extractor.extract(fake, m)?)?;
    acc.finish(with_var, extractor.fingerprint())
}

/// Graph nodes for a batch's moments.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchMomentNodes {
    pub mean: NodeId,
    pub var: Option<NodeId>,
}

/// Mean and clamped variance of each `[N, d_j]` tap.
pub fn batch_moment_nodes(g: &mut Graph, taps: &[NodeId], with_var: bool) -> Result<Vec<BatchMomentNodes>> {
    taps.iter()
        .map(|&t| {
            let rows = g.value(t).shape()[0];
            if with_var && rows < 2 {
                return Err(Error::BatchTooSmall(rows));
            }
            let mean = g.mean_rows(t)?;
            let var = if with_var {
                let sq = g.square(t)?;
                let second = g.mean_rows(sq)?;
                let mean_sq = g.square(mean)?;
                let raw = g.sub(second, mean_sq)?;
                Some(g.relu(raw)?)
            } else {
                None
            };
            Ok(BatchMomentNodes { mean, var })
        })
        .collect()
}

fn check_same_layout(real: &MomentStats, fake: &MomentStats) -> Result<()> {
    if real.fingerprint != fake.fingerprint {
        return Err(Error::Fingerprint {
            stats: real.fingerprint,
            extractor: fake.fingerprint,
        });
    }
    if real.layers.len() < fake.layers.len() {
        return Err(Error::LayerCount {
            requested: fake.layers.len(),
            available: real.layers.len(),
        });
    }
    for (j, (r, f)) in real.layers.iter().zip(&fake.layers).enumerate() {
        if r.width() != f.width() {
            return Err(Error::WidthMismatch {
                layer: j,
                expected: r.width(),
                actual: f.width(),
            });
        }
    }
    Ok(())
}

/// Differences between real and batch moments over the batch's layers.
pub fn delta(real: &MomentStats, fake: &MomentStats) -> Result<MomentDelta> {
    check_same_layout(real, fake)?;
    let diff = |a: &[f32], b: &[f32]| -> Vec<f32> { a.iter().zip(b).map(|(a, b)| a - b).collect() };
    let mean = real
        .layers
        .iter()
        .zip(&fake.layers)
        .map(|(r, f)| diff(&r.mean, &f.mean))
        .collect();
    let var = real
        .layers
        .iter()
        .zip(&fake.layers)
        .map(|(r, f)| match (&r.var, &f.var) {
            (Some(a), Some(b)) => Some(diff(a, b)),
            _ => None,
        })
        .collect::<Option<Vec<_>>>();
    Ok(MomentDelta { mean, var })
}

/// How the per-layer terms are weighted when summed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LayerWeighting {
    #[default]
    Unit,
    /// `1 / d_j`.
    InverseWidth,
}

impl LayerWeighting {
    pub fn weights(self, widths: &[usize]) -> Vec<f64> {
        widths
            .iter()
            .map(|&d| match self {
                LayerWeighting::Unit => 1.0,
                LayerWeighting::InverseWidth => 1.0 / d.max(1) as f64,
            })
            .collect()
    }
}

impl core::fmt::Display for LayerWeighting {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(match self {
            LayerWeighting::Unit => "unit",
            LayerWeighting::InverseWidth => "inverse-width",
        })
    }
}

impl core::str::FromStr for LayerWeighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unit" => Ok(LayerWeighting::Unit),
            "inverse-width" => Ok(LayerWeighting::InverseWidth),
            other => Err(Error::Config(alloc::format!(
                "unknown layer weighting `{other}` (expected unit or inverse-width)"
            ))),
        }
    }
}

/// The two halves of the matching loss.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub mean: f64,
    pub var: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.mean + self.var
    }
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum()
}

/// `Σ_j ‖μ_real − μ_fake‖² + ‖σ_real − σ_fake‖²` over the layers of `fake`,
/// with unit layer weights.
pub fn moment_loss(real: &MomentStats, fake: &MomentStats) -> Result<LossTerms> {
    let w = LayerWeighting::Unit.weights(&fake.widths());
    moment_loss_weighted(real, fake, &w)
}

pub fn moment_loss_weighted(real: &MomentStats, fake: &MomentStats, weights: &[f64]) -> Result<LossTerms> {
    check_same_layout(real, fake)?;
    let mut terms = LossTerms::default();
    for (j, (r, f)) in real.layers.iter().zip(&fake.layers).enumerate() {
        let w = weights.get(j).copied().unwrap_or(1.0);
        terms.mean += w * sq_dist(&r.mean, &f.mean);
        if let (Some(a), Some(b)) = (&r.var, &f.var) {
            terms.var += w * sq_dist(a, b);
        }
    }
    Ok(terms)
}

/// The matching loss as a differentiable node of the batch moments.
pub fn moment_loss_node(
    g: &mut Graph,
    real: &MomentStats,
    batch: &[BatchMomentNodes],
    weights: &[f64],
) -> Result<NodeId> {
    if real.layers.len() < batch.len() {
        return Err(Error::LayerCount {
            requested: batch.len(),
            available: real.layers.len(),
        });
    }
    let mut terms = Vec::new();
    for (j, nodes) in batch.iter().enumerate() {
        let layer = &real.layers[j];
        let w = weights.get(j).copied().unwrap_or(1.0);
        let mut pairs = vec![(&layer.mean, nodes.mean)];
        if let (Some(v), Some(n)) = (&layer.var, nodes.var) {
            pairs.push((v, n));
        }
        for (target, node) in pairs {
            if g.value(node).len() != target.len() {
                return Err(Error::WidthMismatch {
                    layer: j,
                    expected: target.len(),
                    actual: g.value(node).len(),
                });
            }
            let r = g.constant(Tensor::from_vec(target.clone()));
            let d = g.sub(r, node)?;
            let sq = g.square(d)?;
            let s = g.sum(sq)?;
            terms.push(if w == 1.0 { s } else { g.scale(s, w)? });
        }
    }
    sum_terms(g, &terms)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(data: &[f32], d: usize) -> Tensor {
        Tensor::new(&[data.len() / d, d], data.to_vec()).unwrap()
    }

    #[test]
    fn accumulator_matches_direct_moments() {
        let x = rows(&[1.0, 2.0, 3.0, 6.0, 5.0, 10.0], 2);
        let mut acc = MomentAccumulator::new(&[2]);
        acc.push(&[x]).unwrap();
        let s = acc.finish(true, 7).unwrap();
        assert_eq!(s.layers[0].mean, vec![3.0, 6.0]);
        let v = s.layers[0].var.as_ref().unwrap();
        assert!((v[0] - 8.0 / 3.0).abs() < 1e-6);
        assert!((v[1] - 32.0 / 3.0).abs() < 1e-5);
        assert_eq!(s.count, 3);
    }

    #[test]
    fn chunked_equals_whole() {
        let x = Tensor::from_fn(&[10, 3], |i| ((i * 7) % 11) as f32 * 0.25 - 1.0);
        let e = FeatureExtractor::identity(3);
        let whole = precompute_stats(&x, &e, 1, 100).unwrap();
        let chunked = precompute_stats(&x, &e, 1, 3).unwrap();
        for (a, b) in whole.layers[0].mean.iter().zip(&chunked.layers[0].mean) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_features_have_zero_variance() {
        let x = Tensor::full(&[5, 4], 0.1f32);
        let s = batch_stats(&x, &FeatureExtractor::identity(4), 1, true).unwrap();
        assert!(s.layers[0].var.as_ref().unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_row_variance_rejected() {
        let x = Tensor::full(&[1, 4], 0.1f32);
        let e = FeatureExtractor::identity(4);
        assert!(matches!(batch_stats(&x, &e, 1, true), Err(Error::BatchTooSmall(1))));
        assert!(batch_stats(&x, &e, 1, false).is_ok());
    }

    #[test]
    fn loss_of_identical_stats_is_zero() {
        let x = Tensor::from_fn(&[4, 3], |i| i as f32);
        let e = FeatureExtractor::identity(3);
        let s = batch_stats(&x, &e, 1, true).unwrap();
        assert_eq!(moment_loss(&s, &s).unwrap().total(), 0.0);
    }

    #[test]
    fn fingerprint_mismatch_is_reported() {
        let x = Tensor::from_fn(&[4, 3], |i| i as f32);
        let e = FeatureExtractor::identity(3);
        let a = batch_stats(&x, &e, 1, true).unwrap();
        let b = MomentStats {
            fingerprint: a.fingerprint ^ 1,
            ..a.clone()
        };
        assert!(matches!(moment_loss(&a, &b), Err(Error::Fingerprint { .. })));
        assert!(b.check_extractor(&e).is_err());
        assert!(a.check_extractor(&e).is_ok());
    }

    #[test]
    fn node_loss_matches_value_loss() {
        let real = Tensor::from_fn(&[6, 2], |i| ((i * 5) % 7) as f32 * 0.3);
        let fake = Tensor::from_fn(&[4, 2], |i| ((i * 3) % 5) as f32 * 0.2 - 0.4);
        let e = FeatureExtractor::identity(2);
        let rs = batch_stats(&real, &e, 1, true).unwrap();
        let fs = batch_stats(&fake, &e, 1, true).unwrap();
        let want = moment_loss(&rs, &fs).unwrap().total();
        let mut g = Graph::new();
        let x = g.input("x", fake);
        let taps = e.taps(&mut g, x, 1, false).unwrap();
        let nodes = batch_moment_nodes(&mut g, &taps, true).unwrap();
        let loss = moment_loss_node(&mut g, &rs, &nodes, &[1.0]).unwrap();
        assert!((g.value(loss).item() as f64 - want).abs() < 1e-5);
    }

    #[test]
    fn truncate_bounds() {
        let mut acc = MomentAccumulator::new(&[2, 3]);
        acc.push(&[Tensor::zeros(&[2, 2]), Tensor::zeros(&[2, 3])]).unwrap();
        let s = acc.finish(true, 0).unwrap();
        assert_eq!(s.truncate(1).unwrap().widths(), vec![2]);
        assert!(s.truncate(0).is_err());
        assert!(s.truncate(3).is_err());
    }
}
