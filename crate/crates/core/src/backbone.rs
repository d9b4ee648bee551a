//! Frozen random-weight convolutional feature extractor.
//!
//! The stem downsamples by `stem_stride` with stride-2 3×3 convolutions. Each
//! following block is a stack of 3×3 conv + ReLU layers ("bottlenecks") at a
//! constant spatial size, so every tapped map shares one resolution.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{self, Activation, ConvSpec, Real, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    pub channels: usize,
    pub bottlenecks: usize,
    pub dilation: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub input_size: (usize, usize),
    pub stem_stride: usize,
    pub stem_channels: usize,
    pub blocks: Vec<BlockSpec>,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            input_size: (64, 64),
            stem_stride: 4,
            stem_channels: 16,
            blocks: vec![
                BlockSpec { channels: 16, bottlenecks: 2, dilation: 1 },
                BlockSpec { channels: 32, bottlenecks: 2, dilation: 2 },
                BlockSpec { channels: 64, bottlenecks: 2, dilation: 4 },
            ],
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_size;
        if h == 0 || w == 0 {
            return Err(Error::Config("backbone input size must be positive".into()));
        }
        if !self.stem_stride.is_power_of_two() {
            return Err(Error::Config(format!(
                "stem stride {} must be a power of two",
                self.stem_stride
            )));
        }
        if h % self.stem_stride != 0 || w % self.stem_stride != 0 {
            return Err(Error::Config(format!(
                "input {h}x{w} is not divisible by stem stride {}",
                self.stem_stride
            )));
        }
        if self.stem_stride > 1 && self.stem_channels == 0 {
            return Err(Error::Config("stem channels must be positive".into()));
        }
        if self.blocks.is_empty() {
            return Err(Error::Config("backbone needs at least one block".into()));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.channels == 0 || b.bottlenecks == 0 || b.dilation == 0 {
                return Err(Error::Config(format!(
                    "block {i}: channels, bottlenecks and dilation must be positive"
                )));
            }
        }
        Ok(())
    }

    /// Number of tapped layers `L`, i.e. the total bottleneck count.
    pub fn layer_count(&self) -> usize {
        self.blocks.iter().map(|b| b.bottlenecks).sum()
    }

    /// Spatial size shared by all tapped maps.
    pub fn feature_size(&self) -> (usize, usize) {
        (self.input_size.0 / self.stem_stride, self.input_size.1 / self.stem_stride)
    }

    fn stem_layers(&self) -> usize {
        self.stem_stride.trailing_zeros() as usize
    }
}

struct ConvLayer<T> {
    weight: Tensor<T>,
    bias: Tensor<T>,
    spec: ConvSpec,
}

impl<T: Real> ConvLayer<T> {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = tensor::conv2d(x, &self.weight, &self.bias, self.spec)?;
        Ok(tensor::activation(&y, Activation::Relu))
    }
}

/// Per-block, per-bottleneck feature maps of one image.
#[derive(Clone, Debug)]
pub struct FeaturePyramid<T> {
    blocks: Vec<Vec<Tensor<T>>>,
}

impl<T: Real> FeaturePyramid<T> {
    /// Wrap externally computed maps. Every block needs at least one map and
    /// all maps must be `[C,H,W]` with one shared spatial size.
    pub fn new(blocks: Vec<Vec<Tensor<T>>>) -> Result<Self> {
        let first = blocks
            .first()
            .and_then(|b| b.first())
            .ok_or_else(|| Error::invalid("FeaturePyramid::new", "no feature maps"))?;
        let (_, h, w) = first.dims3("FeaturePyramid::new")?;
        for (b, maps) in blocks.iter().enumerate() {
            if maps.is_empty() {
                return Err(Error::invalid("FeaturePyramid::new", format!("block {b} is empty")));
            }
            for (i, m) in maps.iter().enumerate() {
                let (_, mh, mw) = m.dims3("FeaturePyramid::new")?;
                if (mh, mw) != (h, w) {
                    return Err(Error::SpatialMismatch {
                        op: "FeaturePyramid::new",
                        index: i,
                        expected: (h, w),
                        found: (mh, mw),
                    });
                }
            }
        }
        Ok(FeaturePyramid { blocks })
    }

    pub fn blocks(&self) -> &[Vec<Tensor<T>>] {
        &self.blocks
    }

    /// All tapped maps in block-then-bottleneck order.
    pub fn layers(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.blocks.iter().flatten()
    }

    pub fn layer_count(&self) -> usize {
        self.blocks.iter().map(Vec::len).sum()
    }

    /// Output of the last bottleneck of block `b` (0-based).
    pub fn block_output(&self, b: usize) -> &Tensor<T> {
        self.blocks[b].last().expect("blocks are never empty")
    }

    pub fn spatial_size(&self) -> (usize, usize) {
        let s = self.blocks[0][0].shape();
        (s[1], s[2])
    }

    /// Block index of every layer, in [`layers`](Self::layers) order.
    pub fn layer_blocks(&self) -> Vec<usize> {
        self.blocks
            .iter()
            .enumerate()
            .flat_map(|(b, maps)| std::iter::repeat_n(b, maps.len()))
            .collect()
    }
}

/// A frozen feature extractor. Immutable after [`Backbone::build`].
pub struct Backbone<T> {
    config: BackboneConfig,
    stem: Vec<ConvLayer<T>>,
    blocks: Vec<Vec<ConvLayer<T>>>,
}

impl<T: Real> Backbone<T> {
    /// Deterministic He-normal initialization from `cfg.seed`. Weights are
    /// drawn in 64-bit and rounded, so `f32` and `f64` backbones agree.
    pub fn build(cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut layer = |cin: usize, cout: usize, spec: ConvSpec| {
            let fan_in = (cin * 9) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
            let weight = Tensor::from_fn(&[cout, cin, 3, 3], |_| T::lit(normal.sample(&mut rng)));
            let bias_dist = Normal::new(0.0, 0.01).expect("finite std");
            let bias = Tensor::from_fn(&[cout], |_| T::lit(bias_dist.sample(&mut rng)));
            ConvLayer { weight, bias, spec }
        };

        let mut channels = 3;
        let mut stem = Vec::new();
        for _ in 0..cfg.stem_layers() {
            stem.push(layer(channels, cfg.stem_channels, ConvSpec { stride: 2, padding: 1, dilation: 1 }));
            channels = cfg.stem_channels;
        }
        let mut blocks = Vec::new();
        for b in &cfg.blocks {
            let mut layers = Vec::new();
            for _ in 0..b.bottlenecks {
                layers.push(layer(channels, b.channels, ConvSpec::same(3, b.dilation)));
                channels = b.channels;
            }
            blocks.push(layers);
        }
        Ok(Backbone {
            config: cfg.clone(),
            stem,
            blocks,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// Every weight and bias tensor, in a fixed order with stable names.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, l) in self.stem.iter().enumerate() {
            out.push((format!("backbone.stem.{i}.weight"), &l.weight));
            out.push((format!("backbone.stem.{i}.bias"), &l.bias));
        }
        for (b, layers) in self.blocks.iter().enumerate() {
            for (n, l) in layers.iter().enumerate() {
                out.push((format!("backbone.block{b}.{n}.weight"), &l.weight));
                out.push((format!("backbone.block{b}.{n}.bias"), &l.bias));
            }
        }
        out
    }

    /// Replace weights from `(name, tensor)` pairs; every name and shape must
    /// match this backbone.
    pub fn load_tensors<'a>(&mut self, mut lookup: impl FnMut(&str) -> Option<&'a Tensor<f32>>) -> Result<()> {
        let all = self
            .stem
            .iter_mut()
            .enumerate()
            .map(|(i, l)| (format!("backbone.stem.{i}"), l))
            .chain(self.blocks.iter_mut().enumerate().flat_map(|(b, layers)| {
                layers
                    .iter_mut()
                    .enumerate()
                    .map(move |(n, l)| (format!("backbone.block{b}.{n}"), l))
            }));
        for (prefix, l) in all {
            for (suffix, slot) in [("weight", &mut l.weight), ("bias", &mut l.bias)] {
                let name = format!("{prefix}.{suffix}");
                let t = lookup(&name).ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
                if t.shape() != slot.shape() {
                    return Err(Error::Checkpoint(format!(
                        "{name}: checkpoint shape {:?} does not match configured {:?}",
                        t.shape(),
                        slot.shape()
                    )));
                }
                *slot = t.cast();
            }
        }
        Ok(())
    }

    pub fn extract_features(&self, image: &Tensor<T>) -> Result<FeaturePyramid<T>> {
        let (c, h, w) = image.dims3("extract_features")?;
        if c != 3 || (h, w) != self.config.input_size {
            return Err(Error::ShapeMismatch {
                op: "extract_features",
                lhs: "image",
                lhs_shape: image.shape().to_vec(),
                rhs: "configured input",
                rhs_shape: vec![3, self.config.input_size.0, self.config.input_size.1],
            });
        }
        let mut x = image.clone();
        for l in &self.stem {
            x = l.forward(&x)?;
        }
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for layers in &self.blocks {
            let mut maps = Vec::with_capacity(layers.len());
            for l in layers {
                x = l.forward(&x)?;
                maps.push(x.clone());
            }
            blocks.push(maps);
        }
        Ok(FeaturePyramid { blocks })
    }
}

/// Block layouts whose tapped-layer counts mimic common backbones
/// (VGG16: 7, ResNet50: 13, ResNet101: 30). Channel widths are toy-sized.
pub fn mimic_blocks(name: &str) -> Option<Vec<BlockSpec>> {
    let counts: &[usize] = match name {
        "vgg16" => &[2, 3, 2],
        "resnet50" => &[4, 6, 3],
        "resnet101" => &[4, 23, 3],
        _ => return None,
    };
    Some(
        counts
            .iter()
            .zip([8, 8, 8])
            .zip([1, 2, 4])
            .map(|((&bottlenecks, channels), dilation)| BlockSpec { channels, bottlenecks, dilation })
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_has_six_layers_at_16x16() {
        let cfg = BackboneConfig::default();
        assert_eq!(cfg.layer_count(), 6);
        let bb = Backbone::<f32>::build(&cfg).unwrap();
        let pyr = bb.extract_features(&Tensor::full(&[3, 64, 64], 0.5)).unwrap();
        assert_eq!(pyr.layer_count(), 6);
        for map in pyr.layers() {
            assert_eq!(&map.shape()[1..], &[16, 16]);
        }
        assert_eq!(pyr.block_output(2).shape(), &[64, 16, 16]);
    }

    #[test]
    fn same_seed_same_weights() {
        let cfg = BackboneConfig::default();
        let a = Backbone::<f32>::build(&cfg).unwrap();
        let b = Backbone::<f32>::build(&cfg).unwrap();
        for ((na, ta), (nb, tb)) in a.named_tensors().into_iter().zip(b.named_tensors()) {
            assert_eq!(na, nb);
            assert_eq!(ta, tb);
        }
        let other = Backbone::<f32>::build(&BackboneConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.named_tensors()[0].1, other.named_tensors()[0].1);
    }

    #[test]
    fn zero_image_gives_nonnegative_bias_maps() {
        let bb = Backbone::<f64>::build(&BackboneConfig::default()).unwrap();
        let pyr = bb.extract_features(&Tensor::zeros(&[3, 64, 64])).unwrap();
        assert!(pyr.layers().all(|m| m.data().iter().all(|&v| v >= 0.0)));
        assert!(pyr.layers().any(|m| m.data().iter().any(|&v| v > 0.0)));
    }

    #[test]
    fn single_layer_matches_conv_relu() {
        let cfg = BackboneConfig {
            input_size: (8, 8),
            stem_stride: 1,
            stem_channels: 0,
            blocks: vec![BlockSpec { channels: 4, bottlenecks: 1, dilation: 1 }],
            seed: 11,
        };
        let bb = Backbone::<f64>::build(&cfg).unwrap();
        let image = Tensor::from_fn(&[3, 8, 8], |i| ((i * 37) % 11) as f64 / 11.0);
        let pyr = bb.extract_features(&image).unwrap();
        let named = bb.named_tensors();
        let direct = tensor::conv2d(&image, named[0].1, named[1].1, ConvSpec::same(3, 1)).unwrap();
        let expected = tensor::activation(&direct, Activation::Relu);
        for (a, e) in pyr.block_output(0).data().iter().zip(expected.data()) {
            assert!((a - e).abs() < 1e-6);
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = BackboneConfig::default();
        cfg.blocks[1].bottlenecks = 0;
        assert!(Backbone::<f32>::build(&cfg).is_err());
        let cfg = BackboneConfig { stem_stride: 3, ..BackboneConfig::default() };
        assert!(cfg.validate().is_err());
        let bb = Backbone::<f32>::build(&BackboneConfig::default()).unwrap();
        assert!(bb.extract_features(&Tensor::zeros(&[3, 32, 32])).is_err());
    }

    #[test]
    fn mimic_layer_counts() {
        for (name, l) in [("vgg16", 7), ("resnet50", 13), ("resnet101", 30)] {
            let cfg = BackboneConfig {
                input_size: (16, 16),
                blocks: mimic_blocks(name).unwrap(),
                ..BackboneConfig::default()
            };
            assert_eq!(cfg.layer_count(), l);
        }
    }
}
