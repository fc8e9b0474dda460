use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{FeatureExtractor, GeneratorNet};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::optim::Adam;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReconLoss {
    /// Per-element mean squared error.
    Mse,
    /// Laplacian-pyramid L1.
    Lap1,
}

impl fmt::Display for ReconLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReconLoss::Mse => "mse",
            ReconLoss::Lap1 => "lap1",
        })
    }
}

impl FromStr for ReconLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(ReconLoss::Mse),
            "lap1" => Ok(ReconLoss::Lap1),
            other => Err(Error::Config(alloc::format!(
                "unknown reconstruction loss `{other}` (expected mse or lap1)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PretrainConfig {
    pub loss: ReconLoss,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            loss: ReconLoss::Lap1,
            epochs: 5,
            batch_size: 32,
            learning_rate: 2e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    /// Encoder with batch norm folded into fixed affine maps.
    pub extractor: FeatureExtractor,
    pub decoder: GeneratorNet,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Mean training loss of every epoch.
    pub epoch_losses: Vec<f64>,
}

pub fn reconstruction_loss(g: &mut Graph, recon: NodeId, target: NodeId, loss: ReconLoss) -> Result<NodeId> {
    match loss {
        ReconLoss::Mse => {
            let d = g.sub(recon, target)?;
            let sq = g.square(d)?;
            g.mean(sq)
        }
        ReconLoss::Lap1 => g.lap1(recon, target),
    }
}

fn build_loss(
    encoder: &FeatureExtractor,
    decoder: &GeneratorNet,
    batch: Tensor,
    loss: ReconLoss,
) -> Result<(Graph, NodeId)> {
    let mut g = Graph::new();
    let x = g.input("x", batch);
    let code = encoder.encode(&mut g, x, true)?;
    let recon = decoder.forward(&mut g, code, true)?;
    let l = reconstruction_loss(&mut g, recon, x, loss)?;
    Ok((g, l))
}

/// Average loss over consecutive batches of `data`.
fn evaluate(
    encoder: &FeatureExtractor,
    decoder: &GeneratorNet,
    data: &Tensor,
    cfg: &PretrainConfig,
) -> Result<f64> {
    let rows = data.shape()[0];
    let (mut total, mut batches) = (0.0, 0usize);
    let mut start = 0;
    while start + 2 <= rows {
        let end = (start + cfg.batch_size).min(rows);
        let (g, l) = build_loss(encoder, decoder, data.slice_rows(start, end)?, cfg.loss)?;
        total += g.value(l).item() as f64;
        batches += 1;
        start = end;
    }
    Ok(total / batches as f64)
}

/// Trains `encoder` and `decoder` jointly to reconstruct `data`, then freezes
/// the encoder.
pub fn pretrain_autoencoder(
    mut encoder: FeatureExtractor,
    mut decoder: GeneratorNet,
    data: &Tensor,
    cfg: &PretrainConfig,
) -> Result<PretrainOutcome> {
    let rows = data.shape().first().copied().unwrap_or(0);
    if rows == 0 {
        return Err(Error::EmptyData);
    }
    if cfg.batch_size < 2 || rows < 2 {
        return Err(Error::BatchTooSmall(cfg.batch_size.min(rows)));
    }
    if !(cfg.learning_rate > 0.0) {
        return Err(Error::Config("learning rate must be positive".into()));
    }
    if encoder.params().is_none() {
        return Err(Error::Config("only convolutional extractors can be pretrained".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut enc_opt = Adam::new(cfg.learning_rate);
    let mut dec_opt = Adam::new(cfg.learning_rate);
    let initial_loss = evaluate(&encoder, &decoder, data, cfg)?;
    let mut last_finite = initial_loss.is_finite().then_some(initial_loss);
    let mut order: Vec<usize> = (0..rows).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut batches) = (0.0, 0usize);
        for idx in order.chunks(cfg.batch_size).filter(|c| c.len() >= 2) {
            let (g, l) = build_loss(&encoder, &decoder, data.select_rows(idx), cfg.loss)?;
            let value = g.value(l).item() as f64;
            if !value.is_finite() {
                return Err(Error::Diverged { step, last_finite });
            }
            last_finite = Some(value);
            let grads = g.backward(l)?;
            enc_opt.step(encoder.params_mut().expect("conv extractor"), &grads)?;
            dec_opt.step(&mut decoder.params, &grads)?;
            total += value;
            batches += 1;
            step += 1;
        }
        epoch_losses.push(total / batches as f64);
    }
    let final_loss = evaluate(&encoder, &decoder, data, cfg)?;
    let extractor = encoder.freeze(data, cfg.batch_size.max(64))?;
    Ok(PretrainOutcome {
        extractor,
        decoder,
        initial_loss,
        final_loss,
        epoch_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{build_encoder, EncoderConfig, ImageShape};

    fn blobs(n: usize) -> Tensor {
        Tensor::from_fn(&[n, 1, 8, 8], |i| {
            let img = i / 64;
            let (r, c) = ((i % 64) / 8, i % 8);
            let on = if img % 2 == 0 { r < 4 } else { c < 4 };
            if on {
                0.8
            } else {
                -0.8
            }
        })
    }

    fn small() -> EncoderConfig {
        EncoderConfig {
            image: ImageShape::square(1, 8),
            latent_dim: 4,
            width_divisor: 16,
            batch_norm: true,
            seed: 5,
        }
    }

    #[test]
    fn reconstruction_improves() {
        let (enc, dec) = build_encoder(&small()).unwrap();
        let cfg = PretrainConfig {
            loss: ReconLoss::Mse,
            epochs: 30,
            batch_size: 8,
            learning_rate: 5e-3,
            seed: 1,
        };
        let out = pretrain_autoencoder(enc, dec, &blobs(16), &cfg).unwrap();
        assert!(out.final_loss < 0.5 * out.initial_loss, "{} -> {}", out.initial_loss, out.final_loss);
        assert!(out.extractor.is_frozen());
        assert_eq!(out.epoch_losses.len(), 30);
    }

    #[test]
    fn same_seed_same_outcome() {
        let cfg = PretrainConfig {
            loss: ReconLoss::Lap1,
            epochs: 2,
            batch_size: 4,
            learning_rate: 1e-3,
            seed: 9,
        };
        let run = || {
            let (enc, dec) = build_encoder(&small()).unwrap();
            pretrain_autoencoder(enc, dec, &blobs(8), &cfg).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.epoch_losses, b.epoch_losses);
        assert_eq!(a.extractor.fingerprint(), b.extractor.fingerprint());
    }

    #[test]
    fn parse_loss_names() {
        assert_eq!("lap1".parse::<ReconLoss>().unwrap(), ReconLoss::Lap1);
        assert!("l2".parse::<ReconLoss>().is_err());
    }
}
