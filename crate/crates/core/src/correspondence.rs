//! Multi-layer visual correspondence between query and masked support
//! features.
//!
//! For every tapped layer the support map is masked, squeezed to the
//! positions whose mean activation exceeds the map mean, and each query
//! position is scored by the mean ReLU-cosine similarity to the kept support
//! vectors. The resulting maps are frozen inputs to the trainable fusion conv.

use crate::backbone::FeaturePyramid;
use crate::error::{Error, Result};
use crate::tensor::{self, Real, Tensor};

/// Norm below which a feature vector is treated as zero (cosine = 0).
pub const NORM_EPS: f64 = 1e-12;

/// Resized-mask value above which a feature position counts as foreground.
pub const MASK_THRESHOLD: f64 = 0.5;

/// Bilinear resize of a `[1,H,W]` mask to the feature resolution.
pub fn resize_mask<T: Real>(mask: &Tensor<T>, size: (usize, usize)) -> Result<Tensor<T>> {
    tensor::bilinear_resize(mask, size.0, size.1)
}

/// `F_s ⊙ resize(M_s)` with the mask broadcast over channels.
pub fn mask_support_features<T: Real>(features: &Tensor<T>, mask: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, h, w) = features.dims3("mask_support_features")?;
    let resized = resize_mask(mask, (h, w))?;
    tensor::hadamard(features, &resized)
}

/// Support feature columns kept by the mean-threshold squeeze.
#[derive(Clone, Debug)]
pub struct SqueezedSupport<T> {
    /// `[C, N]`, kept positions in row-major spatial order.
    pub columns: Tensor<T>,
    pub kept_indices: Vec<usize>,
    pub threshold: T,
}

impl<T: Real> SqueezedSupport<T> {
    pub fn channels(&self) -> usize {
        self.columns.shape()[0]
    }

    pub fn kept(&self) -> usize {
        self.kept_indices.len()
    }

    fn from_indices(masked: &Tensor<T>, kept_indices: Vec<usize>, threshold: T) -> Self {
        let c = masked.shape()[0];
        let hw = masked.len() / c;
        let n = kept_indices.len();
        let mut data = Vec::with_capacity(c * n);
        for ch in 0..c {
            let plane = &masked.data()[ch * hw..(ch + 1) * hw];
            data.extend(kept_indices.iter().map(|&p| plane[p]));
        }
        SqueezedSupport {
            columns: Tensor::from_vec(&[c, n], data).expect("sized above"),
            kept_indices,
            threshold,
        }
    }

    /// Reorder the kept columns; `order` is a permutation of `0..N`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let indices = order.iter().map(|&i| self.kept_indices[i]).collect();
        let (c, n) = (self.channels(), self.kept());
        let mut data = Vec::with_capacity(c * n);
        for ch in 0..c {
            let row = &self.columns.data()[ch * n..(ch + 1) * n];
            data.extend(order.iter().map(|&i| row[i]));
        }
        SqueezedSupport {
            columns: Tensor::from_vec(&[c, n], data).expect("same size"),
            kept_indices: indices,
            threshold: self.threshold,
        }
    }
}

/// Keep the spatial positions whose channel-mean activation strictly exceeds
/// the mean of the whole masked map.
///
/// When nothing exceeds the mean, every position where `mask_resized > 0.5`
/// is kept instead; with an empty foreground the result has `N = 0`.
pub fn squeeze_features<T: Real>(masked: &Tensor<T>, mask_resized: &Tensor<T>) -> Result<SqueezedSupport<T>> {
    let (c, h, w) = masked.dims3("squeeze_features")?;
    if mask_resized.shape() != [1, h, w] {
        return Err(Error::ShapeMismatch {
            op: "squeeze_features",
            lhs: "masked features",
            lhs_shape: masked.shape().to_vec(),
            rhs: "mask",
            rhs_shape: mask_resized.shape().to_vec(),
        });
    }
    let hw = h * w;
    let threshold = masked.sum() / T::lit((c * hw) as f64);
    let channels = T::lit(c as f64);
    // ties within a few ulps (constant maps) do not count as exceeding
    let margin = threshold.abs() * T::epsilon() * T::lit(16.0);
    let mut position_sums = vec![T::zero(); hw];
    for plane in masked.data().chunks(hw) {
        for (s, &v) in position_sums.iter_mut().zip(plane) {
            *s += v;
        }
    }
    let mut kept: Vec<usize> = position_sums
        .iter()
        .enumerate()
        .filter(|(_, &s)| s / channels - threshold > margin)
        .map(|(p, _)| p)
        .collect();
    if kept.is_empty() {
        let fg = T::lit(MASK_THRESHOLD);
        kept = mask_resized
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &m)| m > fg)
            .map(|(p, _)| p)
            .collect();
    }
    Ok(SqueezedSupport::from_indices(masked, kept, threshold))
}

/// Unit-normalize the columns of a `[C, P]` matrix in place; columns with
/// norm below [`NORM_EPS`] become zero.
fn normalize_columns<T: Real>(data: &mut [T], c: usize, p: usize) {
    let eps = T::lit(NORM_EPS);
    for col in 0..p {
        let norm = (0..c).map(|ch| data[ch * p + col].powi(2)).sum::<T>().sqrt();
        let inv = if norm < eps { T::zero() } else { T::one() / norm };
        for ch in 0..c {
            data[ch * p + col] *= inv;
        }
    }
}

/// Per query position, the mean over kept support columns of
/// `relu(cos(x_q, x_s))`. Output is `[1,H,W]` with values in `[0,1]`.
pub fn cosine_similarity_map<T: Real>(query: &Tensor<T>, support: &SqueezedSupport<T>) -> Result<Tensor<T>> {
    let (c, h, w) = query.dims3("cosine_similarity_map")?;
    if support.channels() != c {
        return Err(Error::ShapeMismatch {
            op: "cosine_similarity_map",
            lhs: "query",
            lhs_shape: query.shape().to_vec(),
            rhs: "support columns",
            rhs_shape: support.columns.shape().to_vec(),
        });
    }
    let hw = h * w;
    let n = support.kept();
    if n == 0 {
        return Ok(Tensor::zeros(&[1, h, w]));
    }
    let mut q = query.data().to_vec();
    normalize_columns(&mut q, c, hw);
    let mut s = support.columns.data().to_vec();
    normalize_columns(&mut s, c, n);

    // sims[s, q] = ŝᵀ q̂, with s read transposed from the [C, N] layout
    let mut sims = vec![T::zero(); n * hw];
    T::gemm(n, c, hw, &s, (1, n as isize), &q, (hw as isize, 1), T::zero(), &mut sims);

    let mut out = vec![T::zero(); hw];
    for row in sims.chunks(hw) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v.max(T::zero());
        }
    }
    let inv_n = T::one() / T::lit(n as f64);
    for o in &mut out {
        // rounding can push a mean of values ≤ 1 a hair above 1
        *o = (*o * inv_n).min(T::one());
    }
    Tensor::from_vec(&[1, h, w], out)
}

/// Correlation maps for every tapped layer, in pyramid order.
#[derive(Clone, Debug)]
pub struct CorrelationStack<T> {
    pub layers: Vec<Tensor<T>>,
}

impl<T: Real> CorrelationStack<T> {
    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    /// The maps as one `[L,H,W]` tensor.
    pub fn stacked(&self) -> Result<Tensor<T>> {
        let parts: Vec<&Tensor<T>> = self.layers.iter().collect();
        tensor::concat_channels(&parts)
    }

    /// Layer-wise mean of several stacks (K-shot aggregation). A single
    /// stack is returned unchanged.
    pub fn mean(stacks: &[CorrelationStack<T>]) -> Result<Self> {
        let (first, rest) = stacks
            .split_first()
            .ok_or_else(|| Error::invalid("correlation mean", "no stacks"))?;
        if rest.is_empty() {
            return Ok(first.clone());
        }
        let inv = T::one() / T::lit(stacks.len() as f64);
        let mut layers = first.layers.clone();
        for other in rest {
            if other.layers.len() != layers.len() {
                return Err(Error::invalid("correlation mean", "layer counts differ"));
            }
            for (acc, l) in layers.iter_mut().zip(&other.layers) {
                acc.add_assign(l)?;
            }
        }
        Ok(CorrelationStack {
            layers: layers.into_iter().map(|l| l.scale(inv)).collect(),
        })
    }

    /// Mean of the maps belonging to each block (energy maps).
    pub fn block_means(&self, layer_blocks: &[usize]) -> Result<Vec<Tensor<T>>> {
        if layer_blocks.len() != self.layers.len() {
            return Err(Error::invalid("block_means", "block index per layer required"));
        }
        let blocks = layer_blocks.iter().max().map_or(0, |b| b + 1);
        let mut out = Vec::with_capacity(blocks);
        for b in 0..blocks {
            let members: Vec<&Tensor<T>> = self
                .layers
                .iter()
                .zip(layer_blocks)
                .filter(|(_, &lb)| lb == b)
                .map(|(l, _)| l)
                .collect();
            let mut acc = members[0].clone();
            for m in &members[1..] {
                acc.add_assign(m)?;
            }
            out.push(acc.scale(T::one() / T::lit(members.len() as f64)));
        }
        Ok(out)
    }
}

/// Mask, squeeze and correlate every layer of the two pyramids.
pub fn multilayer_correlation<T: Real>(
    query: &FeaturePyramid<T>,
    support: &FeaturePyramid<T>,
    support_mask: &Tensor<T>,
) -> Result<CorrelationStack<T>> {
    if query.layer_count() != support.layer_count() {
        return Err(Error::invalid(
            "multilayer_correlation",
            format!(
                "query has {} layers, support has {}",
                query.layer_count(),
                support.layer_count()
            ),
        ));
    }
    let mask = resize_mask(support_mask, support.spatial_size())?;
    let layers = query
        .layers()
        .zip(support.layers())
        .map(|(fq, fs)| {
            if fq.shape() != fs.shape() {
                return Err(Error::ShapeMismatch {
                    op: "multilayer_correlation",
                    lhs: "query layer",
                    lhs_shape: fq.shape().to_vec(),
                    rhs: "support layer",
                    rhs_shape: fs.shape().to_vec(),
                });
            }
            let masked = tensor::hadamard(fs, &mask)?;
            let squeezed = squeeze_features(&masked, &mask)?;
            cosine_similarity_map(fq, &squeezed)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CorrelationStack { layers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(0.0..1.0))
    }

    fn cs_oracle(q: &Tensor<f64>, cols: &[Vec<f64>]) -> Vec<f64> {
        let (c, h, w) = q.dims3("oracle").unwrap();
        let hw = h * w;
        (0..hw)
            .map(|p| {
                if cols.is_empty() {
                    return 0.0;
                }
                let mut total = 0.0;
                for s in cols {
                    let (mut dot, mut nq, mut ns) = (0.0, 0.0, 0.0);
                    for ch in 0..c {
                        let a = q.data()[ch * hw + p];
                        dot += a * s[ch];
                        nq += a * a;
                        ns += s[ch] * s[ch];
                    }
                    let (nq, ns) = (nq.sqrt(), ns.sqrt());
                    let cos = if nq < 1e-12 || ns < 1e-12 { 0.0 } else { dot / (nq * ns) };
                    total += cos.max(0.0);
                }
                total / cols.len() as f64
            })
            .collect()
    }

    fn columns(sq: &SqueezedSupport<f64>) -> Vec<Vec<f64>> {
        let (c, n) = (sq.channels(), sq.kept());
        (0..n).map(|s| (0..c).map(|ch| sq.columns.data()[ch * n + s]).collect()).collect()
    }

    #[test]
    fn masking_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = random(&[3, 4, 4], &mut rng);
        assert_eq!(mask_support_features(&f, &Tensor::full(&[1, 8, 8], 1.0)).unwrap(), f);
        let zero = mask_support_features(&f, &Tensor::zeros(&[1, 8, 8])).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));

        // left half foreground at matching resolution
        let mask = Tensor::from_fn(&[1, 4, 4], |i| if i % 4 < 2 { 1.0 } else { 0.0 });
        let masked = mask_support_features(&f, &mask).unwrap();
        for (i, (&m, &v)) in masked.data().iter().zip(f.data()).enumerate() {
            assert_eq!(m, if i % 4 < 2 { v } else { 0.0 });
        }
    }

    #[test]
    fn squeeze_single_bright_pixel() {
        let mut f = Tensor::<f64>::zeros(&[2, 3, 3]);
        f.data_mut()[4] = 2.0;
        f.data_mut()[9 + 4] = 1.0;
        let sq = squeeze_features(&f, &Tensor::full(&[1, 3, 3], 1.0)).unwrap();
        assert_eq!(sq.kept_indices, vec![4]);
        assert_eq!(sq.columns.data(), &[2.0, 1.0]);
    }

    #[test]
    fn squeeze_constant_falls_back_to_foreground() {
        let f = Tensor::<f64>::full(&[2, 3, 3], 0.7);
        let mask = Tensor::from_fn(&[1, 3, 3], |i| if i < 4 { 1.0 } else { 0.2 });
        let sq = squeeze_features(&f, &mask).unwrap();
        assert_eq!(sq.kept_indices, vec![0, 1, 2, 3]);

        let empty = squeeze_features(&f, &Tensor::zeros(&[1, 3, 3])).unwrap();
        assert_eq!(empty.kept(), 0);
        let q = Tensor::full(&[2, 3, 3], 1.0);
        assert!(cosine_similarity_map(&q, &empty).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn squeeze_matches_threshold_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let f = random(&[4, 6, 6], &mut rng);
            let mask = Tensor::from_fn(&[1, 6, 6], |_| if rng.random_bool(0.5) { 1.0 } else { 0.0 });
            let masked = tensor::hadamard(&f, &mask).unwrap();
            let sq = squeeze_features(&masked, &mask).unwrap();
            let mean: f64 = masked.data().iter().sum::<f64>() / 144.0;
            let expected: Vec<usize> = (0..36)
                .filter(|&p| (0..4).map(|c| masked.data()[c * 36 + p]).sum::<f64>() / 4.0 > mean)
                .collect();
            assert_eq!(sq.kept_indices, expected);
            assert!(sq.kept() <= 36);
        }
    }

    #[test]
    fn cosine_identical_and_orthogonal() {
        let v = [0.3f64, -0.2, 0.9];
        let q = Tensor::from_fn(&[3, 2, 2], |i| v[i / 4]);
        let sq = SqueezedSupport {
            columns: Tensor::from_vec(&[3, 1], v.to_vec()).unwrap(),
            kept_indices: vec![0],
            threshold: 0.0,
        };
        let cs = cosine_similarity_map(&q, &sq).unwrap();
        assert!(cs.data().iter().all(|&x| (x - 1.0).abs() < 1e-12));

        let q = Tensor::from_fn(&[2, 2, 2], |i| if i < 4 { 1.0 } else { 0.0 });
        let sq = SqueezedSupport {
            columns: Tensor::from_vec(&[2, 2], vec![0.0, 0.0, 1.0, 3.0]).unwrap(),
            kept_indices: vec![0, 1],
            threshold: 0.0,
        };
        assert!(cosine_similarity_map(&q, &sq).unwrap().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn cosine_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = Tensor::from_fn(&[3, 4, 4], |_| rng.random_range(-1.0..1.0));
        let sq = SqueezedSupport {
            columns: Tensor::from_fn(&[3, 5], |_| rng.random_range(-1.0..1.0)),
            kept_indices: (0..5).collect(),
            threshold: 0.0,
        };
        let fast = cosine_similarity_map(&q, &sq).unwrap();
        let slow = cs_oracle(&q, &columns(&sq));
        for (a, e) in fast.data().iter().zip(&slow) {
            assert!((a - e).abs() < 1e-6);
        }
        let err = cosine_similarity_map(&Tensor::zeros(&[2, 4, 4]), &sq).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn block_means_average_members() {
        let a = Tensor::<f64>::full(&[1, 2, 2], 0.2);
        let b = Tensor::<f64>::full(&[1, 2, 2], 0.6);
        let c = Tensor::<f64>::full(&[1, 2, 2], 1.0);
        let stack = CorrelationStack { layers: vec![a, b, c.clone()] };
        let means = stack.block_means(&[0, 0, 1]).unwrap();
        assert!(means[0].data().iter().all(|&v| (v - 0.4).abs() < 1e-12));
        assert_eq!(means[1], c);
    }
}
