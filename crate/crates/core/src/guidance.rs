//! Support-derived guidance: merged block-2/3 features, the channel
//! attention vector and map, the masked-average prototype, and the
//! training-free prior mask.

use log::warn;

use crate::autodiff::{ParamStore, Tape, Var};
use crate::correspondence::{MASK_THRESHOLD, NORM_EPS};
use crate::error::{Error, Result};
use crate::nn::ConvParams;
use crate::tensor::{Real, Tensor};

/// `1×1 conv(F_2 ⓒ F_3)`.
pub fn merge_support_features<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    reduce: &ConvParams,
    block2: Var,
    block3: Var,
) -> Result<Var> {
    let cat = tape.concat_channels(&[block2, block3])?;
    reduce.forward(tape, store, cat)
}

/// Masked average pooling, falling back to global pooling when the mask has
/// no foreground at this resolution.
pub fn masked_pool_or_global<T: Real>(tape: &mut Tape<T>, x: Var, mask: &Tensor<T>) -> Result<Var> {
    match tape.masked_avg_pool(x, mask) {
        Err(Error::EmptyForeground { .. }) => {
            warn!("empty support foreground; using global average pooling");
            tape.global_avg_pool(x)
        }
        other => other,
    }
}

/// Bottleneck 1×1 conv net `C_m → C_m/4 → C_m` used inside the attention
/// vector.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub squeeze: ConvParams,
    pub expand: ConvParams,
}

/// `σ(C_N(P(F_23 ⊙ mask)))` with `P` masked average pooling.
pub fn attention_vector<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    params: &AttentionParams,
    merged: Var,
    mask: &Tensor<T>,
) -> Result<Var> {
    let pooled = masked_pool_or_global(tape, merged, mask)?;
    attention_from_pooled(tape, store, params, pooled)
}

pub(crate) fn attention_from_pooled<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    params: &AttentionParams,
    pooled: Var,
) -> Result<Var> {
    let hidden = params.squeeze.forward(tape, store, pooled)?;
    let hidden = tape.relu(hidden);
    let logits = params.expand.forward(tape, store, hidden)?;
    Ok(tape.sigmoid(logits))
}

/// `A_s = F_23 ⊙ V_a`.
pub fn attention_map<T: Real>(tape: &mut Tape<T>, merged: Var, attention: Var) -> Result<Var> {
    tape.hadamard(merged, attention)
}

/// Masked-average prototype `V_s` of the merged support features.
pub fn prototype<T: Real>(tape: &mut Tape<T>, merged: Var, mask: &Tensor<T>) -> Result<Var> {
    masked_pool_or_global(tape, merged, mask)
}

/// Min-max normalize to `[0,1]`; maps whose range is below `1e-6` become zero.
pub fn normalize_min_max<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (lo, hi) = x.min_max();
    let range = hi - lo;
    if !(range > T::lit(1e-6)) {
        return Tensor::zeros(x.shape());
    }
    x.map(|v| ((v - lo) / range).max(T::zero()).min(T::one()))
}

/// Training-free prior: for each query position the maximum cosine
/// similarity to any support foreground position (`mask > 0.5`), min-max
/// normalized over the map. `mask` is at feature resolution.
pub fn prior_mask<T: Real>(query: &Tensor<T>, support: &Tensor<T>, mask: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = query.dims3("prior_mask")?;
    if support.shape() != query.shape() || mask.shape() != [1, h, w] {
        return Err(Error::ShapeMismatch {
            op: "prior_mask",
            lhs: "query",
            lhs_shape: query.shape().to_vec(),
            rhs: "support",
            rhs_shape: support.shape().to_vec(),
        });
    }
    let hw = h * w;
    let fg = T::lit(MASK_THRESHOLD);
    let positions: Vec<usize> = (0..hw).filter(|&p| mask.data()[p] > fg).collect();
    if positions.is_empty() {
        warn!("empty support foreground; prior mask is zero");
        return Ok(Tensor::zeros(&[1, h, w]));
    }
    let n = positions.len();

    let unit = |src: &[T], cols: &mut dyn Iterator<Item = usize>, count: usize| {
        let mut out = vec![T::zero(); c * count];
        for (j, p) in cols.enumerate() {
            let norm = (0..c).map(|ch| src[ch * hw + p].powi(2)).sum::<T>().sqrt();
            if norm < T::lit(NORM_EPS) {
                continue;
            }
            for ch in 0..c {
                out[ch * count + j] = src[ch * hw + p] / norm;
            }
        }
        out
    };
    let q = unit(query.data(), &mut (0..hw), hw);
    let s = unit(support.data(), &mut positions.iter().copied(), n);

    let mut sims = vec![T::zero(); n * hw];
    T::gemm(n, c, hw, &s, (1, n as isize), &q, (hw as isize, 1), T::zero(), &mut sims);
    let mut best = vec![T::neg_infinity(); hw];
    for row in sims.chunks(hw) {
        for (b, &v) in best.iter_mut().zip(row) {
            *b = b.max(v);
        }
    }
    Ok(normalize_min_max(&Tensor::from_vec(&[1, h, w], best)?))
}
