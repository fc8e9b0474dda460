//! ADAM for network parameters.

use alloc::collections::BTreeMap;
use alloc::string::String;

use crate::ama::{AdamMoments, ADAM_BETA1, ADAM_BETA2, ADAM_EPSILON};
use crate::error::{Error, Result};
use crate::graph::Gradients;
use crate::nets::Params;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    state: BTreeMap<String, AdamMoments>,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Self::with_betas(lr, ADAM_BETA1, ADAM_BETA2)
    }

    pub fn with_betas(lr: f32, beta1: f32, beta2: f32) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: ADAM_EPSILON,
            state: BTreeMap::new(),
        }
    }

    /// Per-parameter accumulators, keyed by parameter name.
    pub fn state(&self) -> &BTreeMap<String, AdamMoments> {
        &self.state
    }

    pub fn set_state(&mut self, state: BTreeMap<String, AdamMoments>) {
        self.state = state;
    }

    /// Number of completed steps.
    pub fn steps(&self) -> u64 {
        self.state.values().map(|s| s.t).max().unwrap_or(0)
    }

    /// Applies one update to every parameter that has a gradient.
    pub fn step(&mut self, params: &mut Params, grads: &Gradients) -> Result<()> {
        for (name, grad) in grads.iter() {
            let Some(p) = params.get_mut(name) else {
                continue;
            };
            if p.shape() != grad.shape() {
                return Err(Error::ShapeMismatch {
                    node: 0,
                    op: "adam",
                    expected: p.shape().to_vec(),
                    actual: grad.shape().to_vec(),
                });
            }
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            let moments = self
                .state
                .entry(String::from(name))
                .or_insert_with(|| AdamMoments::with_constants(grad.len(), b1, b2, eps));
            let step = moments.transform(grad.data());
            for (w, s) in p.data_mut().iter_mut().zip(step) {
                *w -= self.lr * s;
            }
        }
        Ok(())
    }
}
