//! Central-difference gradient checking.
//!
//! Analytic gradients come from the `f32` graph; the numeric side replays a
//! copy of the graph in `f64` so that the finite difference is not swamped by
//! single-precision rounding. Elements whose perturbation crosses a ReLU or
//! L1 kink are skipped and counted, never failed.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    /// Parameters with more elements than this are checked on a sample of
    /// this many elements.
    pub max_elements: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-3,
            max_elements: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_error: f64,
    /// `(element, analytic, numeric)` at the largest relative error.
    pub worst: Option<(usize, f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub epsilon: f64,
    pub params: Vec<ParamCheck>,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.params.iter().map(|p| p.checked).sum()
    }

    pub fn skipped(&self) -> usize {
        self.params.iter().map(|p| p.skipped).sum()
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error() < tolerance
    }
}

/// Compares analytic and central-difference gradients of the scalar `loss`
/// for every trainable parameter of `graph`.
pub fn grad_check(graph: &Graph<f32>, loss: NodeId, opts: &GradCheckOptions) -> Result<GradReport> {
    if !(opts.epsilon > 0.0 && opts.epsilon <= 0.1) {
        return Err(Error::Config(alloc::format!(
            "gradient-check epsilon {} outside (0, 0.1]",
            opts.epsilon
        )));
    }
    let analytic = graph.backward(loss)?;
    let mut replay = graph.cast::<f64>();
    let eps = opts.epsilon;
    let mut params = Vec::new();
    for (pi, (name, id)) in graph.trainable_params().into_iter().enumerate() {
        let base = replay.value(id).clone();
        let grad = analytic.get(&name).expect("trainable parameter has a gradient");
        let n = base.len();
        let indices: Vec<usize> = if n <= opts.max_elements {
            (0..n).collect()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ (pi as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let mut idx = sample(&mut rng, n, opts.max_elements).into_vec();
            idx.sort_unstable();
            idx
        };
        let mut check = ParamCheck {
            name: name.clone(),
            checked: 0,
            skipped: 0,
            max_rel_error: 0.0,
            worst: None,
        };
        for i in indices {
            let mut probe = base.clone();
            probe.data_mut()[i] = base.data()[i] + eps;
            replay.forward(&[(&name, probe.clone())])?;
            let (plus, sig_plus) = (replay.value(loss).item(), replay.kink_signature());
            probe.data_mut()[i] = base.data()[i] - eps;
            replay.forward(&[(&name, probe)])?;
            let (minus, sig_minus) = (replay.value(loss).item(), replay.kink_signature());
            if sig_plus != sig_minus {
                check.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[i] as f64;
            let err = relative_error(a, numeric);
            check.checked += 1;
            if err > check.max_rel_error || check.worst.is_none() {
                check.max_rel_error = check.max_rel_error.max(err);
                check.worst = Some((i, a, numeric));
            }
        }
        replay.forward(&[(&name, base)])?;
        params.push(check);
    }
    Ok(GradReport { epsilon: eps, params })
}
