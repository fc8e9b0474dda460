//! Online tracking of a stream `Δ_t` with cost `f_t(v) = ‖v − Δ_t‖²`.
//!
//! Each round the estimator plays its current `v_t`, pays `f_t(v_t)`, and
//! only then sees `Δ_t` and updates.

use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::ama::{ama_step, ma_step, AdamMoments};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Estimator {
    Ma,
    Ama,
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Estimator::Ma => "ma",
            Estimator::Ama => "ama",
        })
    }
}

impl FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ma" => Ok(Estimator::Ma),
            "ama" => Ok(Estimator::Ama),
            other => Err(Error::Config(alloc::format!("unknown estimator `{other}` (expected ma or ama)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegretReport {
    pub estimator: Estimator,
    pub rounds: usize,
    /// `Σ_t ‖v_t − Δ_t‖²`.
    pub cumulative_cost: f64,
    /// `Σ_t ‖v* − Δ_t‖²` with `v* = mean(Δ_t)`.
    pub optimum_cost: f64,
    pub regret: f64,
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// Arithmetic mean of the stream, the minimiser of `Σ_t ‖v − Δ_t‖²`.
pub fn offline_optimum(stream: &[Vec<f32>]) -> Result<Vec<f64>> {
    let first = stream.first().ok_or(Error::EmptyData)?;
    let mut mean = alloc::vec![0.0f64; first.len()];
    for d in stream {
        if d.len() != mean.len() {
            return Err(Error::WidthMismatch {
                layer: 0,
                expected: mean.len(),
                actual: d.len(),
            });
        }
        mean.iter_mut().zip(d).for_each(|(m, &x)| *m += x as f64);
    }
    let n = stream.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(mean)
}

#[derive(Clone, Debug)]
struct Track {
    estimator: Estimator,
    v: Vec<f32>,
    adam: AdamMoments,
    cost: f64,
}

/// Runs several estimators side by side over a stream.
#[derive(Clone, Debug)]
pub struct RegretTracker {
    alpha: f32,
    tracks: Vec<Track>,
    stream: Vec<Vec<f32>>,
}

impl RegretTracker {
    pub fn new(estimators: &[Estimator], v0: &[f32], alpha: f32) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::Config(alloc::format!("rate {alpha} outside (0, 1]")));
        }
        Ok(Self {
            alpha,
            tracks: estimators
                .iter()
                .map(|&estimator| Track {
                    estimator,
                    v: v0.to_vec(),
                    adam: AdamMoments::new(v0.len()),
                    cost: 0.0,
                })
                .collect(),
            stream: Vec::new(),
        })
    }

    /// Current plays, one per estimator.
    pub fn plays(&self) -> Vec<(Estimator, &[f32])> {
        self.tracks.iter().map(|t| (t.estimator, t.v.as_slice())).collect()
    }

    pub fn observe(&mut self, delta: &[f32]) -> Result<()> {
        for t in &mut self.tracks {
            if delta.len() != t.v.len() {
                return Err(Error::WidthMismatch {
                    layer: 0,
                    expected: t.v.len(),
                    actual: delta.len(),
                });
            }
            t.cost += sq_dist(&t.v, delta);
            match t.estimator {
                Estimator::Ma => ma_step(&mut t.v, delta, self.alpha),
                Estimator::Ama => ama_step(&mut t.v, delta, self.alpha, &mut t.adam),
            }
        }
        self.stream.push(delta.to_vec());
        Ok(())
    }

    pub fn reports(&self) -> Result<Vec<RegretReport>> {
        let opt = offline_optimum(&self.stream)?;
        let optimum_cost: f64 = self
            .stream
            .iter()
            .map(|d| opt.iter().zip(d).map(|(&v, &x)| (v - x as f64) * (v - x as f64)).sum::<f64>())
            .sum();
        Ok(self
            .tracks
            .iter()
            .map(|t| RegretReport {
                estimator: t.estimator,
                rounds: self.stream.len(),
                cumulative_cost: t.cost,
                optimum_cost,
                regret: t.cost - optimum_cost,
            })
            .collect())
    }
}

/// Plays every estimator over `stream` from the common start `v0`.
pub fn run_regret(stream: &[Vec<f32>], estimators: &[Estimator], v0: &[f32], alpha: f32) -> Result<Vec<RegretReport>> {
    let mut tracker = RegretTracker::new(estimators, v0, alpha)?;
    for d in stream {
        tracker.observe(d)?;
    }
    tracker.reports()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn ma_full_rate_lags_one_step() {
        let stream = vec![vec![1.0f32], vec![3.0], vec![1.0]];
        let r = run_regret(&stream, &[Estimator::Ma], &[0.0], 1.0).unwrap();
        // plays 0, 1, 3
        assert_eq!(r[0].cumulative_cost, 1.0 + 4.0 + 4.0);
    }

    #[test]
    fn empty_stream_has_no_optimum() {
        assert!(run_regret(&[], &[Estimator::Ma], &[0.0], 0.5).is_err());
    }

    #[test]
    fn bad_rate() {
        assert!(RegretTracker::new(&[Estimator::Ama], &[0.0], 0.0).is_err());
        assert!(RegretTracker::new(&[Estimator::Ama], &[0.0], 1.5).is_err());
    }
}
