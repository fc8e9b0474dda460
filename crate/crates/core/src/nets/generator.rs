use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    check_divisor, forward_layers, init_params, layer_shapes, scaled, spatial_plan, square_size,
    total_param_count, Activation, ImageShape, LayerSpec, Params,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

/// Base widths of the DCGAN-like and residual generators, coarsest first.
const GENERATOR_WIDTHS: [usize; 4] = [512, 256, 128, 64];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GeneratorKind {
    /// Dense projection, stride-2 transposed convolutions, two 3x3 refinement
    /// convolutions and a tanh output.
    Dcgan,
    /// Dense projection followed by upsampling residual blocks.
    Resnet,
    /// Single affine map `G(z) = A z + b` with no output nonlinearity.
    Linear,
}

impl fmt::Display for GeneratorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GeneratorKind::Dcgan => "dcgan",
            GeneratorKind::Resnet => "resnet",
            GeneratorKind::Linear => "linear",
        })
    }
}

impl FromStr for GeneratorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dcgan" => Ok(Self::Dcgan),
            "resnet" => Ok(Self::Resnet),
            "linear" => Ok(Self::Linear),
            _ => Err(Error::Config(format!("unknown generator kind `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GeneratorConfig {
    pub kind: GeneratorKind,
    pub latent_dim: usize,
    pub image: ImageShape,
    /// Channel widths are the reference widths divided by this.
    pub width_divisor: usize,
    pub batch_norm: bool,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            kind: GeneratorKind::Dcgan,
            latent_dim: 100,
            image: ImageShape::square(3, 32),
            width_divisor: 8,
            batch_norm: true,
            seed: 0,
        }
    }
}

pub fn generator_layers(cfg: &GeneratorConfig) -> Result<Vec<LayerSpec>> {
    if cfg.latent_dim == 0 {
        return Err(Error::Config("latent dimension must be at least 1".into()));
    }
    check_divisor(cfg.width_divisor)?;
    let img = cfg.image;
    if cfg.kind == GeneratorKind::Linear {
        return Ok(vec![
            LayerSpec::Dense {
                inputs: cfg.latent_dim,
                outputs: img.len(),
            },
            LayerSpec::Reshape {
                channels: img.channels,
                height: img.height,
                width: img.width,
            },
        ]);
    }
    let (start, ups) = spatial_plan(square_size(&img)?)?;
    let widths: Vec<usize> = GENERATOR_WIDTHS[GENERATOR_WIDTHS.len() - ups - 1..]
        .iter()
        .map(|&w| scaled(w, cfg.width_divisor))
        .collect();
    let relu = LayerSpec::Activation(Activation::Relu);
    let bn = |channels| LayerSpec::BatchNorm { channels };
    let mut layers = vec![
        LayerSpec::Dense {
            inputs: cfg.latent_dim,
            outputs: widths[0] * start * start,
        },
        LayerSpec::Reshape {
            channels: widths[0],
            height: start,
            width: start,
        },
    ];
    let last = *widths.last().expect("at least one width");
    match cfg.kind {
        GeneratorKind::Dcgan => {
            if cfg.batch_norm {
                layers.push(bn(widths[0]));
            }
            layers.push(relu);
            for pair in widths.windows(2) {
                layers.push(LayerSpec::ConvTranspose {
                    in_ch: pair[0],
                    out_ch: pair[1],
                    kernel: 4,
                    stride: 2,
                    padding: 1,
                });
                if cfg.batch_norm {
                    layers.push(bn(pair[1]));
                }
                layers.push(relu);
            }
            for _ in 0..2 {
                layers.push(LayerSpec::Conv {
                    in_ch: last,
                    out_ch: last,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                });
                if cfg.batch_norm {
                    layers.push(bn(last));
                }
                layers.push(relu);
            }
        }
        GeneratorKind::Resnet => {
            for pair in widths.windows(2) {
                layers.push(LayerSpec::ResBlockUp {
                    in_ch: pair[0],
                    out_ch: pair[1],
                });
            }
            layers.push(bn(last));
            layers.push(relu);
        }
        GeneratorKind::Linear => unreachable!(),
    }
    layers.push(LayerSpec::Conv {
        in_ch: last,
        out_ch: img.channels,
        kernel: 3,
        stride: 1,
        padding: 1,
    });
    layers.push(LayerSpec::Activation(Activation::Tanh));
    Ok(layers)
}

/// A generator network `z ↦ G(z; θ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorNet {
    pub config: GeneratorConfig,
    pub layers: Vec<LayerSpec>,
    pub params: Params,
    prefix: String,
}

pub const GENERATOR_PREFIX: &str = "gen";

/// Builds a generator with `N(0, 0.02²)` weights drawn from `cfg.seed`.
pub fn build_generator(cfg: &GeneratorConfig) -> Result<GeneratorNet> {
    GeneratorNet::with_prefix(cfg, GENERATOR_PREFIX)
}

impl GeneratorNet {
    pub(crate) fn with_prefix(cfg: &GeneratorConfig, prefix: &str) -> Result<Self> {
        let layers = generator_layers(cfg)?;
        let shapes = layer_shapes(&layers, &[cfg.latent_dim])?;
        debug_assert_eq!(shapes.last().map(Vec::as_slice), Some(&cfg.image.dims()[..]));
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let params = init_params(&layers, prefix, &mut rng);
        Ok(Self {
            config: *cfg,
            layers,
            params,
            prefix: String::from(prefix),
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn param_count(&self) -> usize {
        self.params.num_elements()
    }

    /// Closed-form parameter count from the layer list.
    pub fn closed_form_param_count(&self) -> usize {
        total_param_count(&self.layers)
    }

    /// Leading component of every parameter name.
    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    /// Appends the generator to `g`; `z` is `[N, latent_dim]`.
    pub fn forward(&self, g: &mut Graph, z: NodeId, trainable: bool) -> Result<NodeId> {
        Ok(forward_layers(&self.layers, &self.params, &self.prefix, g, z, trainable, None)?.output)
    }

    /// Generates a batch `[N, C, H, W]` from latents `[N, latent_dim]`.
    pub fn generate(&self, z: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let zn = g.input("z", z.clone());
        let out = self.forward(&mut g, zn, false)?;
        Ok(g.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(kind: GeneratorKind, nz: usize, image: ImageShape, div: usize) -> GeneratorConfig {
        GeneratorConfig {
            kind,
            latent_dim: nz,
            image,
            width_divisor: div,
            batch_norm: true,
            seed: 7,
        }
    }

    #[test]
    fn dcgan_32_output_shape() {
        let g = build_generator(&cfg(GeneratorKind::Dcgan, 100, ImageShape::square(3, 32), 16)).unwrap();
        let z = Tensor::from_fn(&[2, 100], |i| ((i % 13) as f32 - 6.0) / 6.0);
        let out = g.generate(&z).unwrap();
        assert_eq!(out.shape(), &[2, 3, 32, 32]);
    }

    #[test]
    fn zero_latent_output_is_tanh_bounded() {
        let g = build_generator(&cfg(GeneratorKind::Dcgan, 2, ImageShape::square(1, 8), 512)).unwrap();
        let out = g.generate(&Tensor::zeros(&[3, 2])).unwrap();
        assert_eq!(out.shape(), &[3, 1, 8, 8]);
        assert!(out.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn unsupported_size_lists_supported() {
        let err = build_generator(&cfg(GeneratorKind::Dcgan, 4, ImageShape::square(1, 12), 8)).unwrap_err();
        assert_eq!(
            err,
            Error::UnsupportedImageSize {
                size: 12,
                supported: super::super::SUPPORTED_IMAGE_SIZES
            }
        );
        assert!(alloc::string::ToString::to_string(&err).contains("[8, 16, 28, 32]"));
    }

    #[test]
    fn same_seed_same_params() {
        let c = cfg(GeneratorKind::Resnet, 8, ImageShape::square(1, 16), 32);
        assert_eq!(build_generator(&c).unwrap(), build_generator(&c).unwrap());
        let other = GeneratorConfig { seed: 8, ..c };
        assert_ne!(build_generator(&c).unwrap().params, build_generator(&other).unwrap().params);
    }

    #[test]
    fn size_28_uses_seven_pixel_start() {
        for kind in [GeneratorKind::Dcgan, GeneratorKind::Resnet] {
            let g = build_generator(&cfg(kind, 4, ImageShape::square(1, 28), 64)).unwrap();
            let out = g.generate(&Tensor::zeros(&[2, 4])).unwrap();
            assert_eq!(out.shape(), &[2, 1, 28, 28]);
        }
    }
}
