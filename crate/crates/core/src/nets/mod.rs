//! Network builders: generators, encoders/feature extractors, and
//! autoencoder pretraining.

mod encoder;
mod generator;
mod pretrain;

pub use encoder::{build_encoder, encoder_layers, EncoderConfig, ExtractorKind, FeatureExtractor};
pub use generator::{build_generator, generator_layers, GeneratorConfig, GeneratorKind, GeneratorNet};
pub use pretrain::{pretrain_autoencoder, reconstruction_loss, PretrainConfig, PretrainOutcome, ReconLoss};

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::kernels::{conv_out_len, conv_transpose_out_len};
use crate::tensor::Tensor;

/// Square image sizes the convolutional builders accept.
pub const SUPPORTED_IMAGE_SIZES: &[usize] = &[8, 16, 28, 32];

pub const BATCH_NORM_EPS: f64 = 1e-5;

/// Standard deviation of the Gaussian weight initialisation.
pub const INIT_STD: f32 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn square(channels: usize, size: usize) -> Self {
        Self::new(channels, size, size)
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for ImageShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

impl core::str::FromStr for ImageShape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split('x')
            .map(|p| p.trim().parse::<usize>())
            .collect::<core::result::Result<_, _>>()
            .map_err(|_| Error::Config(format!("bad image shape `{s}`, expected CxHxW")))?;
        match parts.as_slice() {
            &[c, h, w] if c > 0 && h > 0 && w > 0 => Ok(Self::new(c, h, w)),
            _ => Err(Error::Config(format!("bad image shape `{s}`, expected CxHxW"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

/// One layer of a sequential network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Reshape {
        channels: usize,
        height: usize,
        width: usize,
    },
    Conv {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    ConvTranspose {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    /// Batch-statistics normalisation with learnable `gamma`, `beta`.
    BatchNorm { channels: usize },
    /// Fixed per-channel `scale`, `shift`; what a batch norm becomes once frozen.
    Affine { channels: usize },
    /// Pre-activation residual block with 2x nearest upsampling.
    ResBlockUp { in_ch: usize, out_ch: usize },
    Activation(Activation),
}

/// Compact text form, e.g. `conv:3:8:4:2:1` or `relu`.
impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LayerSpec::Dense { inputs, outputs } => write!(f, "dense:{inputs}:{outputs}"),
            LayerSpec::Reshape {
                channels,
                height,
                width,
            } => write!(f, "reshape:{channels}:{height}:{width}"),
            LayerSpec::Conv {
                in_ch,
                out_ch,
                kernel,
                stride,
                padding,
            } => write!(f, "conv:{in_ch}:{out_ch}:{kernel}:{stride}:{padding}"),
            LayerSpec::ConvTranspose {
                in_ch,
                out_ch,
                kernel,
                stride,
                padding,
            } => write!(f, "convt:{in_ch}:{out_ch}:{kernel}:{stride}:{padding}"),
            LayerSpec::BatchNorm { channels } => write!(f, "bn:{channels}"),
            LayerSpec::Affine { channels } => write!(f, "affine:{channels}"),
            LayerSpec::ResBlockUp { in_ch, out_ch } => write!(f, "resup:{in_ch}:{out_ch}"),
            LayerSpec::Activation(Activation::Relu) => f.write_str("relu"),
            LayerSpec::Activation(Activation::Tanh) => f.write_str("tanh"),
        }
    }
}

impl core::str::FromStr for LayerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split(':');
        let kind = parts.next().unwrap_or("");
        let nums: Vec<usize> = parts
            .map(|p| p.parse::<usize>())
            .collect::<core::result::Result<_, _>>()
            .map_err(|_| Error::Config(format!("bad layer `{s}`")))?;
        let want = |n: usize| {
            if nums.len() == n {
                Ok(())
            } else {
                Err(Error::Config(format!("layer `{s}` needs {n} numbers")))
            }
        };
        let layer = match kind {
            "dense" => {
                want(2)?;
                LayerSpec::Dense {
                    inputs: nums[0],
                    outputs: nums[1],
                }
            }
            "reshape" => {
                want(3)?;
                LayerSpec::Reshape {
                    channels: nums[0],
                    height: nums[1],
                    width: nums[2],
                }
            }
            "conv" | "convt" => {
                want(5)?;
                let (in_ch, out_ch, kernel, stride, padding) = (nums[0], nums[1], nums[2], nums[3], nums[4]);
                if kind == "conv" {
                    LayerSpec::Conv {
                        in_ch,
                        out_ch,
                        kernel,
                        stride,
                        padding,
                    }
                } else {
                    LayerSpec::ConvTranspose {
                        in_ch,
                        out_ch,
                        kernel,
                        stride,
                        padding,
                    }
                }
            }
            "bn" => {
                want(1)?;
                LayerSpec::BatchNorm { channels: nums[0] }
            }
            "affine" => {
                want(1)?;
                LayerSpec::Affine { channels: nums[0] }
            }
            "resup" => {
                want(2)?;
                LayerSpec::ResBlockUp {
                    in_ch: nums[0],
                    out_ch: nums[1],
                }
            }
            "relu" | "tanh" => {
                want(0)?;
                LayerSpec::Activation(if kind == "relu" {
                    Activation::Relu
                } else {
                    Activation::Tanh
                })
            }
            _ => return Err(Error::Config(format!("unknown layer kind `{kind}`"))),
        };
        Ok(layer)
    }
}

impl LayerSpec {
    /// `(name, shape)` of every parameter, in initialisation order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let s = |n: &str, shape: &[usize]| (String::from(n), shape.to_vec());
        match *self {
            LayerSpec::Dense { inputs, outputs } => {
                vec![s("weight", &[inputs, outputs]), s("bias", &[outputs])]
            }
            LayerSpec::Conv {
                in_ch,
                out_ch,
                kernel,
                ..
            } => vec![s("weight", &[out_ch, in_ch, kernel, kernel]), s("bias", &[out_ch])],
            LayerSpec::ConvTranspose {
                in_ch,
                out_ch,
                kernel,
                ..
            } => vec![s("weight", &[in_ch, out_ch, kernel, kernel]), s("bias", &[out_ch])],
            LayerSpec::BatchNorm { channels } => vec![s("gamma", &[channels]), s("beta", &[channels])],
            LayerSpec::Affine { channels } => vec![s("scale", &[channels]), s("shift", &[channels])],
            LayerSpec::ResBlockUp { in_ch, out_ch } => vec![
                s("bn1.gamma", &[in_ch]),
                s("bn1.beta", &[in_ch]),
                s("conv1.weight", &[out_ch, in_ch, 3, 3]),
                s("conv1.bias", &[out_ch]),
                s("bn2.gamma", &[out_ch]),
                s("bn2.beta", &[out_ch]),
                s("conv2.weight", &[out_ch, out_ch, 3, 3]),
                s("conv2.bias", &[out_ch]),
                s("skip.weight", &[out_ch, in_ch, 1, 1]),
                s("skip.bias", &[out_ch]),
            ],
            LayerSpec::Reshape { .. } | LayerSpec::Activation(_) => vec![],
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |expected: &[usize]| Error::ShapeMismatch {
            node: 0,
            op: "layer",
            expected: expected.to_vec(),
            actual: input.to_vec(),
        };
        let n: usize = input.iter().product();
        match *self {
            LayerSpec::Dense { inputs, outputs } => {
                if n != inputs {
                    return Err(bad(&[inputs]));
                }
                Ok(vec![outputs])
            }
            LayerSpec::Reshape {
                channels,
                height,
                width,
            } => {
                if n != channels * height * width {
                    return Err(bad(&[channels, height, width]));
                }
                Ok(vec![channels, height, width])
            }
            LayerSpec::Conv {
                in_ch,
                out_ch,
                kernel,
                stride,
                padding,
            } => {
                let [c, h, w] = three(input).ok_or_else(|| bad(&[in_ch, 0, 0]))?;
                let oh = conv_out_len(h, kernel, stride, padding);
                let ow = conv_out_len(w, kernel, stride, padding);
                match (c == in_ch, oh, ow) {
                    (true, Some(oh), Some(ow)) => Ok(vec![out_ch, oh, ow]),
                    _ => Err(bad(&[in_ch, h, w])),
                }
            }
            LayerSpec::ConvTranspose {
                in_ch,
                out_ch,
                kernel,
                stride,
                padding,
            } => {
                let [c, h, w] = three(input).ok_or_else(|| bad(&[in_ch, 0, 0]))?;
                let oh = conv_transpose_out_len(h, kernel, stride, padding);
                let ow = conv_transpose_out_len(w, kernel, stride, padding);
                match (c == in_ch, oh, ow) {
                    (true, Some(oh), Some(ow)) => Ok(vec![out_ch, oh, ow]),
                    _ => Err(bad(&[in_ch, h, w])),
                }
            }
            LayerSpec::BatchNorm { channels } | LayerSpec::Affine { channels } => {
                if input.first() != Some(&channels) {
                    return Err(bad(&[channels]));
                }
                Ok(input.to_vec())
            }
            LayerSpec::ResBlockUp { in_ch, out_ch } => {
                let [c, h, w] = three(input).ok_or_else(|| bad(&[in_ch, 0, 0]))?;
                if c != in_ch {
                    return Err(bad(&[in_ch, h, w]));
                }
                Ok(vec![out_ch, 2 * h, 2 * w])
            }
            LayerSpec::Activation(_) => Ok(input.to_vec()),
        }
    }
}

fn three(s: &[usize]) -> Option<[usize; 3]> {
    match *s {
        [c, h, w] => Some([c, h, w]),
        _ => None,
    }
}

/// Shape of every layer's output for a per-sample input shape.
pub fn layer_shapes(layers: &[LayerSpec], input: &[usize]) -> Result<Vec<Vec<usize>>> {
    let mut shapes = Vec::with_capacity(layers.len());
    let mut cur = input.to_vec();
    for (i, l) in layers.iter().enumerate() {
        cur = l.output_shape(&cur).map_err(|e| match e {
            Error::ShapeMismatch {
                expected, actual, ..
            } => Error::ShapeMismatch {
                node: i,
                op: "layer",
                expected,
                actual,
            },
            other => other,
        })?;
        shapes.push(cur.clone());
    }
    Ok(shapes)
}

pub fn total_param_count(layers: &[LayerSpec]) -> usize {
    layers.iter().map(LayerSpec::param_count).sum()
}

/// Named parameter tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params(BTreeMap<String, Tensor>);

impl Params {
    pub fn new() -> Self {
        Self(BTreeMap::new())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.0.get_mut(name)
    }

    pub fn insert(&mut self, name: String, value: Tensor) -> Option<Tensor> {
        self.0.insert(name, value)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.0.values().map(Tensor::len).sum()
    }

    fn node(&self, g: &mut Graph, name: &str, trainable: bool) -> Result<NodeId> {
        let t = self
            .0
            .get(name)
            .ok_or_else(|| Error::UnknownLeaf(String::from(name)))?;
        Ok(g.param(name, t.clone(), trainable))
    }

    /// Replaces every tensor with a same-shaped one from `other`.
    pub fn load_from(&mut self, other: &Params) -> Result<()> {
        for (name, t) in self.0.iter_mut() {
            let src = other
                .get(name)
                .ok_or_else(|| Error::UnknownLeaf(name.clone()))?;
            if src.shape() != t.shape() {
                return Err(Error::ShapeMismatch {
                    node: 0,
                    op: "load",
                    expected: t.shape().to_vec(),
                    actual: src.shape().to_vec(),
                });
            }
            *t = src.clone();
        }
        Ok(())
    }
}

pub(crate) fn param_name(prefix: &str, layer: usize, name: &str) -> String {
    format!("{prefix}.{layer:02}.{name}")
}

pub(crate) fn init_params(layers: &[LayerSpec], prefix: &str, rng: &mut impl Rng) -> Params {
    let normal = Normal::new(0.0f32, INIT_STD).expect("valid std");
    let mut params = Params::new();
    for (i, layer) in layers.iter().enumerate() {
        for (name, shape) in layer.param_shapes() {
            let leaf = name.rsplit('.').next().unwrap_or(&name);
            let t = match leaf {
                "weight" => Tensor::from_fn(&shape, |_| normal.sample(rng)),
                "gamma" | "scale" => Tensor::full(&shape, 1.0),
                _ => Tensor::zeros(&shape),
            };
            params.insert(param_name(prefix, i, &name), t);
        }
    }
    params
}

/// Output node plus the post-ReLU taps in order.
pub(crate) struct Forward {
    pub output: NodeId,
    pub taps: Vec<NodeId>,
}

/// Runs `layers` on `x`, stopping once `max_taps` ReLU outputs have been seen.
pub(crate) fn forward_layers(
    layers: &[LayerSpec],
    params: &Params,
    prefix: &str,
    g: &mut Graph,
    x: NodeId,
    trainable: bool,
    max_taps: Option<usize>,
) -> Result<Forward> {
    let mut h = x;
    let mut taps = Vec::new();
    for (i, layer) in layers.iter().enumerate() {
        let p = |name: &str| param_name(prefix, i, name);
        h = match *layer {
            LayerSpec::Dense { .. } => {
                let flat = if g.value(h).rank() == 2 { h } else { g.flatten(h)? };
                let w = params.node(g, &p("weight"), trainable)?;
                let b = params.node(g, &p("bias"), trainable)?;
                let y = g.matmul(flat, w)?;
                g.add_bias(y, b)?
            }
            LayerSpec::Reshape {
                channels,
                height,
                width,
            } => {
                let n = g.value(h).shape()[0];
                g.reshape(h, &[n, channels, height, width])?
            }
            LayerSpec::Conv { stride, padding, .. } => {
                let w = params.node(g, &p("weight"), trainable)?;
                let b = params.node(g, &p("bias"), trainable)?;
                let y = g.conv2d(h, w, stride, padding)?;
                g.add_bias(y, b)?
            }
            LayerSpec::ConvTranspose { stride, padding, .. } => {
                let w = params.node(g, &p("weight"), trainable)?;
                let b = params.node(g, &p("bias"), trainable)?;
                let y = g.conv_transpose2d(h, w, stride, padding)?;
                g.add_bias(y, b)?
            }
            LayerSpec::BatchNorm { .. } => {
                let gamma = params.node(g, &p("gamma"), trainable)?;
                let beta = params.node(g, &p("beta"), trainable)?;
                let y = g.batch_norm(h, BATCH_NORM_EPS)?;
                g.channel_affine(y, gamma, beta)?
            }
            LayerSpec::Affine { .. } => {
                let scale = params.node(g, &p("scale"), trainable)?;
                let shift = params.node(g, &p("shift"), trainable)?;
                g.channel_affine(h, scale, shift)?
            }
            LayerSpec::ResBlockUp { .. } => {
                let node = |g: &mut Graph, n: &str| params.node(g, &p(n), trainable);
                let (g1, b1) = (node(g, "bn1.gamma")?, node(g, "bn1.beta")?);
                let y = g.batch_norm(h, BATCH_NORM_EPS)?;
                let y = g.channel_affine(y, g1, b1)?;
                let y = g.relu(y)?;
                let y = g.upsample2x(y)?;
                let (w1, c1) = (node(g, "conv1.weight")?, node(g, "conv1.bias")?);
                let y = g.conv2d(y, w1, 1, 1)?;
                let y = g.add_bias(y, c1)?;
                let (g2, b2) = (node(g, "bn2.gamma")?, node(g, "bn2.beta")?);
                let y = g.batch_norm(y, BATCH_NORM_EPS)?;
                let y = g.channel_affine(y, g2, b2)?;
                let y = g.relu(y)?;
                let (w2, c2) = (node(g, "conv2.weight")?, node(g, "conv2.bias")?);
                let y = g.conv2d(y, w2, 1, 1)?;
                let y = g.add_bias(y, c2)?;
                let up = g.upsample2x(h)?;
                let (ws, cs) = (node(g, "skip.weight")?, node(g, "skip.bias")?);
                let s = g.conv2d(up, ws, 1, 0)?;
                let s = g.add_bias(s, cs)?;
                g.add(y, s)?
            }
            LayerSpec::Activation(Activation::Relu) => {
                let y = g.relu(h)?;
                taps.push(y);
                if max_taps.is_some_and(|m| taps.len() >= m) {
                    return Ok(Forward { output: y, taps });
                }
                y
            }
            LayerSpec::Activation(Activation::Tanh) => g.tanh(h)?,
        };
    }
    Ok(Forward { output: h, taps })
}

pub(crate) fn check_divisor(div: usize) -> Result<()> {
    if div == 0 {
        return Err(Error::Config("width divisor must be at least 1".into()));
    }
    Ok(())
}

/// Spatial extent of the coarsest feature map and the number of 2x steps
/// between it and `size`.
pub(crate) fn spatial_plan(size: usize) -> Result<(usize, usize)> {
    match size {
        8 => Ok((4, 1)),
        16 => Ok((4, 2)),
        28 => Ok((7, 2)),
        32 => Ok((4, 3)),
        _ => Err(Error::UnsupportedImageSize {
            size,
            supported: SUPPORTED_IMAGE_SIZES,
        }),
    }
}

pub(crate) fn square_size(image: &ImageShape) -> Result<usize> {
    if image.height != image.width {
        return Err(Error::UnsupportedImageSize {
            size: image.height.max(image.width),
            supported: SUPPORTED_IMAGE_SIZES,
        });
    }
    Ok(image.height)
}

pub(crate) fn scaled(width: usize, div: usize) -> usize {
    (width / div).max(1)
}
