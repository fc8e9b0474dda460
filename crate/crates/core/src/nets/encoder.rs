use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{
    check_divisor, forward_layers, init_params, layer_shapes, param_name, scaled, spatial_plan,
    square_size, Activation, GeneratorConfig, GeneratorKind, GeneratorNet, ImageShape, LayerSpec,
    Params, BATCH_NORM_EPS,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

const ENCODER_WIDTHS: [usize; 4] = [64, 128, 256, 512];
pub const ENCODER_PREFIX: &str = "enc";
pub const DECODER_PREFIX: &str = "dec";

/// Strided-convolution encoder in the style of a DCGAN discriminator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub image: ImageShape,
    pub latent_dim: usize,
    pub width_divisor: usize,
    pub batch_norm: bool,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image: ImageShape::square(3, 32),
            latent_dim: 128,
            width_divisor: 8,
            batch_norm: true,
            seed: 0,
        }
    }
}

/// Every convolution is followed by (batch norm and) a ReLU whose output is a
/// feature tap; the last convolution collapses the map to `latent_dim × 1 × 1`.
pub fn encoder_layers(cfg: &EncoderConfig) -> Result<Vec<LayerSpec>> {
    if cfg.latent_dim < 1 {
        return Err(Error::Config("encoder latent size must be at least 1".into()));
    }
    check_divisor(cfg.width_divisor)?;
    let (start, downs) = spatial_plan(square_size(&cfg.image)?)?;
    let mut layers = Vec::new();
    let mut prev = cfg.image.channels;
    let push_block = |layers: &mut Vec<LayerSpec>, conv: LayerSpec, out: usize| {
        layers.push(conv);
        if cfg.batch_norm {
            layers.push(LayerSpec::BatchNorm { channels: out });
        }
        layers.push(LayerSpec::Activation(Activation::Relu));
    };
    for &w in &ENCODER_WIDTHS[..downs] {
        let w = scaled(w, cfg.width_divisor);
        let conv = LayerSpec::Conv {
            in_ch: prev,
            out_ch: w,
            kernel: 4,
            stride: 2,
            padding: 1,
        };
        push_block(&mut layers, conv, w);
        prev = w;
    }
    let latent = LayerSpec::Conv {
        in_ch: prev,
        out_ch: cfg.latent_dim,
        kernel: start,
        stride: 1,
        padding: 0,
    };
    push_block(&mut layers, latent, cfg.latent_dim);
    Ok(layers)
}

#[derive(Clone, Debug, PartialEq)]
pub enum ExtractorKind {
    /// The flattened input is the single tap.
    Identity { width: usize },
    Conv {
        config: Option<EncoderConfig>,
        image: ImageShape,
        layers: Vec<LayerSpec>,
        params: Params,
    },
}

/// A network whose post-ReLU activations serve as features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    kind: ExtractorKind,
    frozen: bool,
    tap_widths: Vec<usize>,
}

/// Builds an encoder (not yet frozen) and the matching decoder.
pub fn build_encoder(cfg: &EncoderConfig) -> Result<(FeatureExtractor, GeneratorNet)> {
    let layers = encoder_layers(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = init_params(&layers, ENCODER_PREFIX, &mut rng);
    let mut encoder = FeatureExtractor::from_layers(cfg.image, layers, params, false)?;
    if let ExtractorKind::Conv { config, .. } = &mut encoder.kind {
        *config = Some(*cfg);
    }
    let decoder_cfg = GeneratorConfig {
        kind: GeneratorKind::Dcgan,
        latent_dim: cfg.latent_dim,
        image: cfg.image,
        width_divisor: cfg.width_divisor,
        batch_norm: cfg.batch_norm,
        seed: cfg.seed.wrapping_add(1),
    };
    let decoder = GeneratorNet::with_prefix(&decoder_cfg, DECODER_PREFIX)?;
    Ok((encoder, decoder))
}

impl FeatureExtractor {
    /// Features are the raw input values, flattened.
    pub fn identity(width: usize) -> Self {
        Self {
            kind: ExtractorKind::Identity { width },
            frozen: true,
            tap_widths: vec![width],
        }
    }

    /// Wraps an explicit layer list; parameter names use the `enc` prefix.
    pub fn from_layers(
        image: ImageShape,
        layers: Vec<LayerSpec>,
        params: Params,
        frozen: bool,
    ) -> Result<Self> {
        let shapes = layer_shapes(&layers, &image.dims())?;
        let tap_widths: Vec<usize> = layers
            .iter()
            .zip(&shapes)
            .filter(|(l, _)| **l == LayerSpec::Activation(Activation::Relu))
            .map(|(_, s)| s.iter().product())
            .collect();
        if tap_widths.is_empty() {
            return Err(Error::Config("extractor has no ReLU taps".into()));
        }
        for (i, layer) in layers.iter().enumerate() {
            for (name, shape) in layer.param_shapes() {
                let full = param_name(ENCODER_PREFIX, i, &name);
                match params.get(&full) {
                    Some(t) if t.shape() == shape.as_slice() => {}
                    Some(t) => {
                        return Err(Error::ShapeMismatch {
                            node: i,
                            op: "layer",
                            expected: shape,
                            actual: t.shape().to_vec(),
                        })
                    }
                    None => return Err(Error::UnknownLeaf(full)),
                }
            }
        }
        Ok(Self {
            kind: ExtractorKind::Conv {
                config: None,
                image,
                layers,
                params,
            },
            frozen,
            tap_widths,
        })
    }

    pub fn kind(&self) -> &ExtractorKind {
        &self.kind
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn config(&self) -> Option<&EncoderConfig> {
        match &self.kind {
            ExtractorKind::Conv { config, .. } => config.as_ref(),
            ExtractorKind::Identity { .. } => None,
        }
    }

    pub fn params(&self) -> Option<&Params> {
        match &self.kind {
            ExtractorKind::Conv { params, .. } => Some(params),
            ExtractorKind::Identity { .. } => None,
        }
    }

    pub(crate) fn params_mut(&mut self) -> Option<&mut Params> {
        match &mut self.kind {
            ExtractorKind::Conv { params, .. } => Some(params),
            ExtractorKind::Identity { .. } => None,
        }
    }

    pub fn layers(&self) -> &[LayerSpec] {
        match &self.kind {
            ExtractorKind::Conv { layers, .. } => layers,
            ExtractorKind::Identity { .. } => &[],
        }
    }

    /// Total number of taps `L`.
    pub fn num_taps(&self) -> usize {
        self.tap_widths.len()
    }

    /// Width `d_j` of every tap.
    pub fn tap_widths(&self) -> &[usize] {
        &self.tap_widths
    }

    pub fn check_layers(&self, m: usize) -> Result<()> {
        if m < 1 || m > self.num_taps() {
            return Err(Error::LayerCount {
                requested: m,
                available: self.num_taps(),
            });
        }
        Ok(())
    }

    /// Appends the first `m` taps of `x` to `g`, each flattened to `[N, d_j]`.
    pub fn taps(&self, g: &mut Graph, x: NodeId, m: usize, trainable: bool) -> Result<Vec<NodeId>> {
        self.check_layers(m)?;
        match &self.kind {
            ExtractorKind::Identity { width } => {
                let flat = g.flatten(x)?;
                let got = g.value(flat).shape()[1];
                if got != *width {
                    return Err(Error::WidthMismatch {
                        layer: 0,
                        expected: *width,
                        actual: got,
                    });
                }
                Ok(vec![flat])
            }
            ExtractorKind::Conv { layers, params, .. } => {
                let fwd = forward_layers(layers, params, ENCODER_PREFIX, g, x, trainable, Some(m))?;
                fwd.taps.into_iter().map(|t| g.flatten(t)).collect()
            }
        }
    }

    /// Features of a batch `x`: `m` matrices of shape `[N, d_j]`.
    pub fn extract(&self, x: &Tensor, m: usize) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let xn = g.input("x", x.clone());
        let taps = self.taps(&mut g, xn, m, false)?;
        Ok(taps.into_iter().map(|t| g.value(t).clone()).collect())
    }

    /// Encoder output (the deepest tap) for a batch.
    pub fn encode(&self, g: &mut Graph, x: NodeId, trainable: bool) -> Result<NodeId> {
        let taps = self.taps(g, x, self.num_taps(), trainable)?;
        Ok(*taps.last().expect("at least one tap"))
    }

    /// Digest of the extractor's architecture and parameters.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Sha256::new();
        match &self.kind {
            ExtractorKind::Identity { width } => {
                h.update(b"identity");
                h.update((*width as u64).to_le_bytes());
            }
            ExtractorKind::Conv {
                image,
                layers,
                params,
                ..
            } => {
                h.update(b"conv");
                for d in image.dims() {
                    h.update((d as u64).to_le_bytes());
                }
                h.update(format!("{layers:?}").as_bytes());
                for (name, t) in params.iter() {
                    h.update(name.as_bytes());
                    for &d in t.shape() {
                        h.update((d as u64).to_le_bytes());
                    }
                    for v in t.data() {
                        h.update(v.to_le_bytes());
                    }
                }
            }
        }
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    /// Replaces every batch norm with a fixed affine map built from the
    /// population statistics of `data` and marks the extractor frozen.
    /// Statistics are gathered layer by layer in chunks of `chunk` rows.
    pub fn freeze(&self, data: &Tensor, chunk: usize) -> Result<FeatureExtractor> {
        let ExtractorKind::Conv {
            config,
            image,
            layers,
            params,
        } = &self.kind
        else {
            return Ok(Self {
                frozen: true,
                ..self.clone()
            });
        };
        if data.shape().first().copied().unwrap_or(0) == 0 {
            return Err(Error::EmptyData);
        }
        let mut layers = layers.clone();
        let mut params = params.clone();
        for i in 0..layers.len() {
            let channels = match layers[i] {
                LayerSpec::BatchNorm { channels } => channels,
                LayerSpec::ResBlockUp { .. } => {
                    return Err(Error::Config("residual blocks cannot be frozen".into()))
                }
                _ => continue,
            };
            let (mean, var) = channel_stats(&layers[..i], &params, data, chunk, channels)?;
            let gamma = params
                .get(&param_name(ENCODER_PREFIX, i, "gamma"))
                .ok_or_else(|| Error::UnknownLeaf(param_name(ENCODER_PREFIX, i, "gamma")))?
                .clone();
            let beta = params
                .get(&param_name(ENCODER_PREFIX, i, "beta"))
                .ok_or_else(|| Error::UnknownLeaf(param_name(ENCODER_PREFIX, i, "beta")))?
                .clone();
            let mut scale = Vec::with_capacity(channels);
            let mut shift = Vec::with_capacity(channels);
            for c in 0..channels {
                let s = gamma.data()[c] as f64 / libm::sqrt(var[c] + BATCH_NORM_EPS);
                scale.push(s as f32);
                shift.push((beta.data()[c] as f64 - mean[c] * s) as f32);
            }
            let mut kept = Params::new();
            for (name, t) in params.iter() {
                if name != param_name(ENCODER_PREFIX, i, "gamma") && name != param_name(ENCODER_PREFIX, i, "beta") {
                    kept.insert(String::from(name), t.clone());
                }
            }
            kept.insert(param_name(ENCODER_PREFIX, i, "scale"), Tensor::from_vec(scale));
            kept.insert(param_name(ENCODER_PREFIX, i, "shift"), Tensor::from_vec(shift));
            params = kept;
            layers[i] = LayerSpec::Affine { channels };
        }
        let mut frozen = FeatureExtractor::from_layers(*image, layers, params, true)?;
        if let ExtractorKind::Conv { config: c, .. } = &mut frozen.kind {
            *c = *config;
        }
        Ok(frozen)
    }
}

/// Per-channel population mean and variance of the output of `prefix_layers`.
fn channel_stats(
    prefix_layers: &[LayerSpec],
    params: &Params,
    data: &Tensor,
    chunk: usize,
    channels: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let rows = data.shape()[0];
    let chunk = chunk.max(1);
    let mut sum = vec![0.0f64; channels];
    let mut sq = vec![0.0f64; channels];
    let mut count = 0usize;
    let mut start = 0;
    while start < rows {
        let end = (start + chunk).min(rows);
        let batch = data.slice_rows(start, end)?;
        let mut g = Graph::new();
        let x = g.input("x", batch);
        let out = forward_layers(prefix_layers, params, ENCODER_PREFIX, &mut g, x, false, None)?.output;
        let v = g.value(out);
        let (n, c, inner) = crate::kernels::channel_layout(v.shape());
        if c != channels {
            return Err(Error::WidthMismatch {
                layer: prefix_layers.len(),
                expected: channels,
                actual: c,
            });
        }
        for b in 0..n {
            for ch in 0..c {
                for &x in &v.data()[(b * c + ch) * inner..(b * c + ch + 1) * inner] {
                    let x = x as f64;
                    sum[ch] += x;
                    sq[ch] += x * x;
                }
            }
        }
        count += n * inner;
        start = end;
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    let var = sq
        .iter()
        .zip(&mean)
        .map(|(s, m)| (s / count as f64 - m * m).max(0.0))
        .collect();
    Ok((mean, var))
}
