//! Moving-average estimators of the feature-moment differences.
//!
//! The plain moving average (MA) is one gradient step of rate `alpha` on
//! `½‖v − Δ‖²`. The ADAM moving average (AMA) replaces that step with an
//! ADAM step on the same loss. Mean and variance tracks are updated with the
//! same mechanics and keep separate per-layer accumulators.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::moments::{BatchMomentNodes, MomentDelta, MomentStats};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f32 = 0.9;
pub const ADAM_BETA2: f32 = 0.999;
pub const ADAM_EPSILON: f32 = 1e-8;

/// First/second moment accumulators behind `ADAM(x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamMoments {
    pub m: Vec<f32>,
    pub u: Vec<f32>,
    pub t: u64,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl AdamMoments {
    pub fn new(width: usize) -> Self {
        Self::with_constants(width, ADAM_BETA1, ADAM_BETA2, ADAM_EPSILON)
    }

    pub fn with_constants(width: usize, beta1: f32, beta2: f32, eps: f32) -> Self {
        Self {
            m: vec![0.0; width],
            u: vec![0.0; width],
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn width(&self) -> usize {
        self.m.len()
    }

    /// Advances the accumulators by `x` and returns the bias-corrected
    /// `m̂ / (√û + ε)`.
    pub fn transform(&mut self, x: &[f32]) -> Vec<f32> {
        assert_eq!(x.len(), self.m.len(), "ADAM input width");
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let t = self.t as f64;
        let c1 = 1.0 - libm::pow(b1 as f64, t);
        let c2 = 1.0 - libm::pow(b2 as f64, t);
        let eps = self.eps as f64;
        x.iter()
            .zip(self.m.iter_mut().zip(self.u.iter_mut()))
            .map(|(&g, (m, u))| {
                *m = b1 * *m + (1.0 - b1) * g;
                *u = b2 * *u + (1.0 - b2) * g * g;
                let m_hat = *m as f64 / c1;
                let u_hat = *u as f64 / c2;
                (m_hat / (libm::sqrt(u_hat) + eps)) as f32
            })
            .collect()
    }
}

/// `v ← v − α (v − Δ)`, the gradient step on `½‖v − Δ‖²`.
pub fn ma_step(v: &mut [f32], delta: &[f32], alpha: f32) {
    for (v, &d) in v.iter_mut().zip(delta) {
        let grad = *v - d;
        *v -= alpha * grad;
    }
}

/// `v ← v − α ADAM(v − Δ)`.
pub fn ama_step(v: &mut [f32], delta: &[f32], alpha: f32, adam: &mut AdamMoments) {
    let grad: Vec<f32> = v.iter().zip(delta).map(|(&v, &d)| v - d).collect();
    let step = adam.transform(&grad);
    for (v, s) in v.iter_mut().zip(step) {
        *v -= alpha * s;
    }
}

fn check_widths(expected: &[Vec<f32>], actual: &[Vec<f32>]) -> Result<()> {
    if expected.len() != actual.len() {
        return Err(Error::WidthMismatch {
            layer: expected.len().min(actual.len()),
            expected: expected.len(),
            actual: actual.len(),
        });
    }
    for (layer, (e, a)) in expected.iter().zip(actual).enumerate() {
        if e.len() != a.len() {
            return Err(Error::WidthMismatch {
                layer,
                expected: e.len(),
                actual: a.len(),
            });
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VInit {
    /// Start from the first observed difference.
    FirstDelta,
    Zero,
}

fn initial(delta: &[Vec<f32>], init: VInit) -> Vec<Vec<f32>> {
    match init {
        VInit::FirstDelta => delta.to_vec(),
        VInit::Zero => delta.iter().map(|d| vec![0.0; d.len()]).collect(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaState {
    pub alpha: f32,
    pub mean: Vec<Vec<f32>>,
    pub var: Option<Vec<Vec<f32>>>,
}

impl MaState {
    pub fn new(alpha: f32, first: &MomentDelta, init: VInit) -> Result<Self> {
        check_alpha(alpha)?;
        Ok(Self {
            alpha,
            mean: initial(&first.mean, init),
            var: first.var.as_ref().map(|v| initial(v, init)),
        })
    }

    pub fn update(&mut self, delta: &MomentDelta) -> Result<()> {
        check_widths(&self.mean, &delta.mean)?;
        check_track_pair(&self.var, &delta.var)?;
        for (v, d) in self.mean.iter_mut().zip(&delta.mean) {
            ma_step(v, d, self.alpha);
        }
        if let (Some(vs), Some(ds)) = (self.var.as_mut(), delta.var.as_ref()) {
            for (v, d) in vs.iter_mut().zip(ds) {
                ma_step(v, d, self.alpha);
            }
        }
        Ok(())
    }
}

fn check_alpha(alpha: f32) -> Result<()> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Config(alloc::format!("moving-average rate {alpha} outside (0, 1]")));
    }
    Ok(())
}

fn check_track_pair(state: &Option<Vec<Vec<f32>>>, delta: &Option<Vec<Vec<f32>>>) -> Result<()> {
    match (state, delta) {
        (Some(s), Some(d)) => check_widths(s, d),
        (None, None) => Ok(()),
        (s, d) => Err(Error::WidthMismatch {
            layer: 0,
            expected: s.as_ref().map_or(0, Vec::len),
            actual: d.as_ref().map_or(0, Vec::len),
        }),
    }
}

/// One AMA-tracked vector and its ADAM accumulators.
#[derive(Clone, Debug, PartialEq)]
pub struct AmaTrack {
    pub v: Vec<f32>,
    pub adam: AdamMoments,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AmaState {
    pub alpha: f32,
    pub mean: Vec<AmaTrack>,
    pub var: Option<Vec<AmaTrack>>,
}

fn tracks(v: Vec<Vec<f32>>) -> Vec<AmaTrack> {
    v.into_iter()
        .map(|v| AmaTrack {
            adam: AdamMoments::new(v.len()),
            v,
        })
        .collect()
}

impl AmaState {
    pub fn new(alpha: f32, first: &MomentDelta, init: VInit) -> Result<Self> {
        check_alpha(alpha)?;
        Ok(Self {
            alpha,
            mean: tracks(initial(&first.mean, init)),
            var: first.var.as_ref().map(|v| tracks(initial(v, init))),
        })
    }

    /// Steps taken so far.
    pub fn t(&self) -> u64 {
        self.mean.first().map_or(0, |t| t.adam.t)
    }

    pub fn update(&mut self, delta: &MomentDelta) -> Result<()> {
        let vs: Vec<Vec<f32>> = self.mean.iter().map(|t| t.v.clone()).collect();
        check_widths(&vs, &delta.mean)?;
        let var_vs = self.var.as_ref().map(|ts| ts.iter().map(|t| t.v.clone()).collect());
        check_track_pair(&var_vs, &delta.var)?;
        for (track, d) in self.mean.iter_mut().zip(&delta.mean) {
            ama_step(&mut track.v, d, self.alpha, &mut track.adam);
        }
        if let (Some(ts), Some(ds)) = (self.var.as_mut(), delta.var.as_ref()) {
            for (track, d) in ts.iter_mut().zip(ds) {
                ama_step(&mut track.v, d, self.alpha, &mut track.adam);
            }
        }
        Ok(())
    }
}

/// Either moving-average estimator.
#[derive(Clone, Debug, PartialEq)]
pub enum MovingAverage {
    Ma(MaState),
    Ama(AmaState),
}

impl MovingAverage {
    pub fn update(&mut self, delta: &MomentDelta) -> Result<()> {
        match self {
            MovingAverage::Ma(s) => s.update(delta),
            MovingAverage::Ama(s) => s.update(delta),
        }
    }

    pub fn mean(&self) -> Vec<&[f32]> {
        match self {
            MovingAverage::Ma(s) => s.mean.iter().map(Vec::as_slice).collect(),
            MovingAverage::Ama(s) => s.mean.iter().map(|t| t.v.as_slice()).collect(),
        }
    }

    pub fn var(&self) -> Option<Vec<&[f32]>> {
        match self {
            MovingAverage::Ma(s) => s.var.as_ref().map(|v| v.iter().map(Vec::as_slice).collect()),
            MovingAverage::Ama(s) => s.var.as_ref().map(|v| v.iter().map(|t| t.v.as_slice()).collect()),
        }
    }
}

/// Surrogate generator loss
/// `Σ_j w_j [v_j · (μ_real,j − μ̂_j) + v^σ_j · (σ_real,j − σ̂_j)]`
/// with the tracked vectors entering as constants.
pub fn surrogate_loss_node(
    g: &mut Graph,
    v_mean: &[&[f32]],
    v_var: Option<&[&[f32]]>,
    real: &MomentStats,
    batch: &[BatchMomentNodes],
    weights: &[f64],
) -> Result<NodeId> {
    if v_mean.len() != batch.len() || real.layers.len() < batch.len() || weights.len() < batch.len() {
        return Err(Error::WidthMismatch {
            layer: 0,
            expected: batch.len(),
            actual: v_mean.len(),
        });
    }
    let mut terms = Vec::new();
    for (j, nodes) in batch.iter().enumerate() {
        let layer = &real.layers[j];
        let mut push_term = |v: &[f32], real: &[f32], fake: NodeId, g: &mut Graph| -> Result<()> {
            if v.len() != real.len() || g.value(fake).len() != v.len() {
                return Err(Error::WidthMismatch {
                    layer: j,
                    expected: real.len(),
                    actual: v.len(),
                });
            }
            let r = g.constant(Tensor::from_vec(real.to_vec()));
            let diff = g.sub(r, fake)?;
            let vv = g.constant(Tensor::from_vec(v.to_vec()));
            let dot = g.dot(vv, diff)?;
            terms.push(if weights[j] == 1.0 { dot } else { g.scale(dot, weights[j])? });
            Ok(())
        };
        push_term(v_mean[j], &layer.mean, nodes.mean, g)?;
        if let (Some(vv), Some(var_node)) = (v_var, nodes.var) {
            let real_var = layer.var.as_ref().ok_or(Error::WidthMismatch {
                layer: j,
                expected: vv[j].len(),
                actual: 0,
            })?;
            push_term(vv[j], real_var, var_node, g)?;
        }
    }
    sum_terms(g, &terms)
}

pub(crate) fn sum_terms(g: &mut Graph, terms: &[NodeId]) -> Result<NodeId> {
    let mut acc = *terms.first().ok_or(Error::EmptyData)?;
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}
