//! The meta-learner: fuses correlation, attention, prototype and prior-mask
//! guidance over frozen backbone features and predicts a two-class mask.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamStore, Tape, Var};
use crate::backbone::{BackboneConfig, FeaturePyramid};
use crate::correspondence::{self, CorrelationStack};
use crate::decoder::{self, AsppParams, ConvBlockParams, DecoderInputs, HeadParams};
use crate::error::{Error, Result};
use crate::guidance::{self, AttentionParams};
use crate::nn::ConvParams;
use crate::tensor::{ConvSpec, Real, Tensor};

/// Which guidance signals reach the decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModuleToggles {
    pub multi_similarity: bool,
    pub attention: bool,
    pub prototype: bool,
    pub prior_mask: bool,
}

impl Default for ModuleToggles {
    fn default() -> Self {
        ModuleToggles {
            multi_similarity: true,
            attention: true,
            prototype: true,
            prior_mask: true,
        }
    }
}

impl ModuleToggles {
    pub fn any(&self) -> bool {
        self.multi_similarity || self.attention || self.prototype || self.prior_mask
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Fused correlation width.
    pub alpha: usize,
    /// Width of the merged block-2/3 features.
    pub merged_channels: usize,
    pub decoder_channels: usize,
    pub aspp_rates: Vec<usize>,
    pub toggles: ModuleToggles,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            alpha: 64,
            merged_channels: 64,
            decoder_channels: 128,
            aspp_rates: vec![1, 2, 4],
            toggles: ModuleToggles::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.toggles.any() {
            return Err(Error::Config(
                "all four guidance modules are disabled; enable at least one".into(),
            ));
        }
        if self.alpha == 0 || self.merged_channels == 0 || self.decoder_channels == 0 {
            return Err(Error::Config("model widths must be positive".into()));
        }
        Ok(())
    }

    /// Channel count of the assembled decoder input.
    pub fn decoder_input_channels(&self) -> usize {
        let t = self.toggles;
        let cm = self.merged_channels;
        (t.multi_similarity as usize) * self.alpha
            + (t.attention as usize) * cm
            + (t.prior_mask as usize)
            + (t.prototype as usize) * cm
            + cm
    }
}

/// One query and its K supports, as frozen features.
pub struct EpisodeFeatures<'a, T> {
    pub query: &'a FeaturePyramid<T>,
    pub supports: Vec<SupportFeatures<'a, T>>,
    /// Query image size; predictions are produced at this resolution.
    pub out_size: (usize, usize),
}

pub struct SupportFeatures<'a, T> {
    pub pyramid: &'a FeaturePyramid<T>,
    /// Full-resolution `{0,1}` mask, `[1,H,W]`.
    pub mask: &'a Tensor<T>,
}

/// Everything a forward pass produced, with `probs` on the tape.
pub struct ForwardOutput<T> {
    pub probs: Var,
    pub correlation: Option<CorrelationStack<T>>,
    pub prior_mask: Option<Tensor<T>>,
    pub attention_map: Option<Var>,
    pub prototype: Var,
}

pub struct MetaLearner<T> {
    config: ModelConfig,
    layer_count: usize,
    store: ParamStore<T>,
    fuse: Option<ConvParams>,
    reduce: ConvParams,
    attention: Option<AttentionParams>,
    aspp: AsppParams,
    block: ConvBlockParams,
    head: HeadParams,
}

impl<T: Real> MetaLearner<T> {
    /// Fresh He-initialized head for features from `backbone`.
    pub fn new(config: &ModelConfig, backbone: &BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        backbone.validate()?;
        if backbone.blocks.len() != 3 {
            return Err(Error::Config(format!(
                "the meta-learner needs exactly 3 backbone blocks, got {}",
                backbone.blocks.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let l = backbone.layer_count();
        let cm = config.merged_channels;
        let cd = config.decoder_channels;
        let pw = ConvSpec::POINTWISE;
        let same = ConvSpec::same(3, 1);

        let fuse = config
            .toggles
            .multi_similarity
            .then(|| ConvParams::new(&mut store, "fuse", l, config.alpha, 1, pw, &mut rng));
        let merged_in = backbone.blocks[0].channels + backbone.blocks[1].channels;
        let reduce = ConvParams::new(&mut store, "reduce", merged_in, cm, 1, pw, &mut rng);
        let attention = config.toggles.attention.then(|| {
            let hidden = (cm / 4).max(1);
            AttentionParams {
                squeeze: ConvParams::new(&mut store, "attention.squeeze", cm, hidden, 1, pw, &mut rng),
                expand: ConvParams::new(&mut store, "attention.expand", hidden, cm, 1, pw, &mut rng),
            }
        });
        let aspp = AsppParams::new(&mut store, config.decoder_input_channels(), cd, &config.aspp_rates, &mut rng)?;
        let block = ConvBlockParams {
            first: ConvParams::new(&mut store, "block.conv1", cd, cd, 3, same, &mut rng),
            second: ConvParams::new(&mut store, "block.conv2", cd, cd, 3, same, &mut rng),
        };
        let head = HeadParams {
            hidden: ConvParams::new(&mut store, "head.conv3x3", cd, cd, 3, same, &mut rng),
            logits: ConvParams::new(&mut store, "head.conv1x1", cd, 2, 1, pw, &mut rng),
        };
        Ok(MetaLearner {
            config: config.clone(),
            layer_count: l,
            store,
            fuse,
            reduce,
            attention,
            aspp,
            block,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Same architecture with every parameter cast to `U`.
    pub fn cast<U: Real>(&self) -> MetaLearner<U> {
        let mut store = ParamStore::new();
        for (_, p) in self.store.iter() {
            store.add(p.name.clone(), p.value.cast(), p.trainable);
        }
        MetaLearner {
            config: self.config.clone(),
            layer_count: self.layer_count,
            store,
            fuse: self.fuse.clone(),
            reduce: self.reduce.clone(),
            attention: self.attention.clone(),
            aspp: self.aspp.clone(),
            block: self.block.clone(),
            head: self.head.clone(),
        }
    }

    /// Record the full forward pass on `tape`. With K > 1 supports, the
    /// correlation stacks are averaged layer-wise and the attention maps,
    /// prototypes and prior masks are averaged before a single decoder pass.
    pub fn forward(&self, tape: &mut Tape<T>, episode: &EpisodeFeatures<'_, T>) -> Result<ForwardOutput<T>> {
        if episode.supports.is_empty() {
            return Err(Error::invalid("forward", "episode has no supports"));
        }
        self.check_layers(episode.query)?;
        let query_features = self.merged(tape, episode.query)?;
        let per_support = episode
            .supports
            .iter()
            .map(|s| self.support_guidance(tape, episode.query, s))
            .collect::<Result<Vec<_>>>()?;
        let guidance = Guidance::mean(tape, per_support)?;
        self.decode(tape, query_features, guidance, episode.out_size)
    }

    /// The single-support pass with no aggregation step.
    pub fn forward_one_shot(
        &self,
        tape: &mut Tape<T>,
        query: &FeaturePyramid<T>,
        support: &SupportFeatures<'_, T>,
        out_size: (usize, usize),
    ) -> Result<ForwardOutput<T>> {
        self.check_layers(query)?;
        let query_features = self.merged(tape, query)?;
        let guidance = self.support_guidance(tape, query, support)?;
        self.decode(tape, query_features, guidance, out_size)
    }

    fn check_layers(&self, q: &FeaturePyramid<T>) -> Result<()> {
        if q.layer_count() != self.layer_count {
            return Err(Error::invalid(
                "forward",
                format!("pyramid has {} layers, model expects {}", q.layer_count(), self.layer_count),
            ));
        }
        Ok(())
    }

    /// `F_23` of a pyramid.
    fn merged(&self, tape: &mut Tape<T>, p: &FeaturePyramid<T>) -> Result<Var> {
        let b2 = tape.constant(p.block_output(0).clone());
        let b3 = tape.constant(p.block_output(1).clone());
        guidance::merge_support_features(tape, &self.store, &self.reduce, b2, b3)
    }

    fn support_guidance(
        &self,
        tape: &mut Tape<T>,
        q: &FeaturePyramid<T>,
        support: &SupportFeatures<'_, T>,
    ) -> Result<Guidance<T>> {
        let toggles = self.config.toggles;
        let s = support.pyramid;
        let mask = correspondence::resize_mask(support.mask, q.spatial_size())?;
        let correlation = if toggles.multi_similarity {
            Some(correspondence::multilayer_correlation(q, s, support.mask)?)
        } else {
            None
        };
        let merged = self.merged(tape, s)?;
        let prototype = guidance::prototype(tape, merged, &mask)?;
        let attention_map = match &self.attention {
            Some(attn) => {
                let va = guidance::attention_from_pooled(tape, &self.store, attn, prototype)?;
                Some(guidance::attention_map(tape, merged, va)?)
            }
            None => None,
        };
        let last = q.blocks().len() - 1;
        let prior_mask = if toggles.prior_mask {
            Some(guidance::prior_mask(q.block_output(last), s.block_output(last), &mask)?)
        } else {
            None
        };
        Ok(Guidance {
            correlation,
            attention_map,
            prototype,
            prior_mask,
        })
    }

    fn decode(
        &self,
        tape: &mut Tape<T>,
        query_features: Var,
        g: Guidance<T>,
        out_size: (usize, usize),
    ) -> Result<ForwardOutput<T>> {
        let store = &self.store;
        let fused = match (&self.fuse, &g.correlation) {
            (Some(fuse), Some(stack)) => {
                let maps = tape.constant(stack.stacked()?);
                Some(fuse.forward(tape, store, maps)?)
            }
            _ => None,
        };
        let prior_var = g.prior_mask.as_ref().map(|p| tape.constant(p.clone()));
        let x = decoder::assemble_decoder_input(
            tape,
            &DecoderInputs {
                correlation: fused,
                attention_map: g.attention_map,
                prior_mask: prior_var,
                prototype: self.config.toggles.prototype.then_some(g.prototype),
                query_features,
            },
        )?;
        let x = decoder::aspp(tape, store, &self.aspp, x)?;
        let x = decoder::conv_block(tape, store, &self.block, x)?;
        let probs = decoder::classify(tape, store, &self.head, x, out_size)?;
        Ok(ForwardOutput {
            probs,
            correlation: g.correlation,
            prior_mask: g.prior_mask,
            attention_map: g.attention_map,
            prototype: g.prototype,
        })
    }

    /// Foreground probabilities `[2,H,W]` without keeping the tape.
    pub fn predict_probs(&self, episode: &EpisodeFeatures<'_, T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, episode)?;
        Ok(tape.value(out.probs).clone())
    }

    /// Binary mask (`p_fg > 0.5`) for the query.
    pub fn predict_mask(&self, episode: &EpisodeFeatures<'_, T>) -> Result<Vec<u8>> {
        let probs = self.predict_probs(episode)?;
        let hw = probs.len() / 2;
        let half = T::lit(0.5);
        Ok(probs.data()[hw..].iter().map(|&p| (p > half) as u8).collect())
    }

    /// BCE loss on the query mask plus the forward output.
    pub fn loss(
        &self,
        tape: &mut Tape<T>,
        episode: &EpisodeFeatures<'_, T>,
        query_mask: &Tensor<T>,
    ) -> Result<(Var, ForwardOutput<T>)> {
        let out = self.forward(tape, episode)?;
        let loss = tape.bce(out.probs, query_mask)?;
        Ok((loss, out))
    }
}

/// Guidance derived from one support, or the K-shot average.
struct Guidance<T> {
    correlation: Option<CorrelationStack<T>>,
    attention_map: Option<Var>,
    prototype: Var,
    prior_mask: Option<Tensor<T>>,
}

impl<T: Real> Guidance<T> {
    fn mean(tape: &mut Tape<T>, mut all: Vec<Guidance<T>>) -> Result<Self> {
        if all.len() == 1 {
            return Ok(all.pop().expect("one element"));
        }
        let correlation = all
            .iter()
            .map(|g| g.correlation.clone())
            .collect::<Option<Vec<_>>>()
            .map(|stacks| CorrelationStack::mean(&stacks))
            .transpose()?;
        let attention_map = all
            .iter()
            .map(|g| g.attention_map)
            .collect::<Option<Vec<_>>>()
            .map(|maps| tape.mean(&maps))
            .transpose()?;
        let prototypes: Vec<Var> = all.iter().map(|g| g.prototype).collect();
        let prototype = tape.mean(&prototypes)?;
        let prior_mask = all
            .into_iter()
            .map(|g| g.prior_mask)
            .collect::<Option<Vec<_>>>()
            .map(mean_tensors)
            .transpose()?;
        Ok(Guidance {
            correlation,
            attention_map,
            prototype,
            prior_mask,
        })
    }
}

fn mean_tensors<T: Real>(xs: Vec<Tensor<T>>) -> Result<Tensor<T>> {
    let mut acc = xs[0].clone();
    for x in &xs[1..] {
        acc.add_assign(x)?;
    }
    Ok(acc.scale(T::one() / T::lit(xs.len() as f64)))
}
