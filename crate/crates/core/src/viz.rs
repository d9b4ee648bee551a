//! Per-block correlation energy maps, the prior mask and the prediction for
//! one episode.

use crate::correspondence::{self, CorrelationStack};
use crate::error::Result;
use crate::guidance;
use crate::model::{EpisodeFeatures, MetaLearner};
use crate::tensor::Tensor;

pub struct EpisodeMaps {
    /// Mean correlation map of each backbone block, `[1,h,w]`.
    pub block_energy: Vec<Tensor<f32>>,
    pub prior: Tensor<f32>,
    /// `{0,1}` query prediction at image resolution.
    pub pred: Vec<u8>,
}

/// Maps are computed from the features directly, so they exist even when
/// the corresponding module is switched off in the model.
pub fn episode_maps(model: &MetaLearner<f32>, episode: &EpisodeFeatures<'_, f32>) -> Result<EpisodeMaps> {
    let q = episode.query;
    let size = q.spatial_size();
    let mut stacks = Vec::new();
    let mut priors = Vec::new();
    for s in &episode.supports {
        stacks.push(correspondence::multilayer_correlation(q, s.pyramid, s.mask)?);
        let mask = correspondence::resize_mask(s.mask, size)?;
        let last = q.blocks().len() - 1;
        priors.push(guidance::prior_mask(q.block_output(last), s.pyramid.block_output(last), &mask)?);
    }
    let stack = CorrelationStack::mean(&stacks)?;
    let mut prior = priors[0].clone();
    for p in &priors[1..] {
        prior.add_assign(p)?;
    }
    let prior = prior.scale(1.0 / priors.len() as f32);
    Ok(EpisodeMaps {
        block_energy: stack.block_means(&q.layer_blocks())?,
        prior,
        pred: model.predict_mask(episode)?,
    })
}
