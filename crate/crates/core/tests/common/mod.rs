//! Fixtures and brute-force oracles shared by the integration tests.
#![allow(dead_code)]

use msanet_core::backbone::{BackboneConfig, BlockSpec, FeaturePyramid};
use msanet_core::model::ModelConfig;
use msanet_core::Tensor;
use rand::Rng;

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Non-negative random maps, like post-ReLU backbone features.
pub fn random_pyramid(channels: &[&[usize]], h: usize, w: usize, rng: &mut impl Rng) -> FeaturePyramid<f64> {
    let blocks = channels
        .iter()
        .map(|layers| {
            layers
                .iter()
                .map(|&c| Tensor::from_fn(&[c, h, w], |_| rng.random_range(0.0..1.0f64).powi(2)))
                .collect()
        })
        .collect();
    FeaturePyramid::new(blocks).unwrap()
}

/// Binary mask with a random axis-aligned foreground rectangle.
pub fn random_mask(h: usize, w: usize, rng: &mut impl Rng) -> Tensor<f64> {
    let y0 = rng.random_range(0..h / 2);
    let x0 = rng.random_range(0..w / 2);
    let y1 = rng.random_range(y0 + h / 4..=h);
    let x1 = rng.random_range(x0 + w / 4..=w);
    Tensor::from_fn(&[1, h, w], |i| {
        let (y, x) = (i / w, i % w);
        (y >= y0 && y < y1 && x >= x0 && x < x1) as u8 as f64
    })
}

/// Small backbone and head used for 64-bit checks.
pub fn tiny_configs() -> (BackboneConfig, ModelConfig) {
    let backbone = BackboneConfig {
        input_size: (16, 16),
        stem_stride: 2,
        stem_channels: 4,
        blocks: vec![
            BlockSpec {
                channels: 4,
                bottlenecks: 2,
                dilation: 1,
            },
            BlockSpec {
                channels: 6,
                bottlenecks: 2,
                dilation: 2,
            },
            BlockSpec {
                channels: 8,
                bottlenecks: 2,
                dilation: 2,
            },
        ],
        seed: 5,
    };
    let model = ModelConfig {
        alpha: 4,
        merged_channels: 8,
        decoder_channels: 8,
        aspp_rates: vec![1, 2, 4],
        ..ModelConfig::default()
    };
    (backbone, model)
}

/// align_corners=false bilinear sample of a single-channel `[h,w]` map.
pub fn bilinear_oracle(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let coord = |o: usize, n_in: usize, n_out: usize| {
        let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        let (y0, y1, fy) = coord(y, h, oh);
        for x in 0..ow {
            let (x0, x1, fx) = coord(x, w, ow);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out[y * ow + x] = top * (1.0 - fy) + bottom * fy;
        }
    }
    out
}

fn column(t: &Tensor<f64>, p: usize) -> Vec<f64> {
    let c = t.shape()[0];
    let hw = t.len() / c;
    (0..c).map(|ch| t.data()[ch * hw + p]).collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// Mask the support, squeeze by the mean rule (falling back to foreground
/// positions), and average `relu(cos)` per query position, one loop at a
/// time.
pub fn cs_layer_oracle(query: &Tensor<f64>, support: &Tensor<f64>, mask_small: &[f64]) -> Vec<f64> {
    let c = query.shape()[0];
    let hw = query.len() / c;
    let masked: Vec<f64> = (0..c * hw).map(|i| support.data()[i] * mask_small[i % hw]).collect();
    let masked = Tensor::from_vec(support.shape(), masked).unwrap();
    let global = masked.data().iter().sum::<f64>() / (c * hw) as f64;
    let mut kept: Vec<usize> = (0..hw)
        .filter(|&p| column(&masked, p).iter().sum::<f64>() / c as f64 > global)
        .collect();
    if kept.is_empty() {
        kept = (0..hw).filter(|&p| mask_small[p] > 0.5).collect();
    }
    (0..hw)
        .map(|q| {
            if kept.is_empty() {
                return 0.0;
            }
            let qv = column(query, q);
            kept.iter()
                .map(|&s| cosine(&qv, &column(&masked, s)).max(0.0))
                .sum::<f64>()
                / kept.len() as f64
        })
        .collect()
}

/// Max cosine to any foreground support position, min-max normalized.
pub fn prior_oracle(query: &Tensor<f64>, support: &Tensor<f64>, mask_small: &[f64]) -> Vec<f64> {
    let c = query.shape()[0];
    let hw = query.len() / c;
    let fg: Vec<usize> = (0..hw).filter(|&p| mask_small[p] > 0.5).collect();
    if fg.is_empty() {
        return vec![0.0; hw];
    }
    let raw: Vec<f64> = (0..hw)
        .map(|q| {
            let qv = column(query, q);
            fg.iter()
                .map(|&s| cosine(&qv, &column(support, s)))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo < 1e-6 {
        return vec![0.0; hw];
    }
    raw.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// `Σ x·m / Σ m` per channel.
pub fn weighted_mean_oracle(x: &Tensor<f64>, mask: &[f64]) -> Vec<f64> {
    let c = x.shape()[0];
    let hw = x.len() / c;
    let total: f64 = mask.iter().sum();
    (0..c)
        .map(|ch| (0..hw).map(|p| x.data()[ch * hw + p] * mask[p]).sum::<f64>() / total)
        .collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
