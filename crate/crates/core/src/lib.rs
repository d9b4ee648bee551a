//! Few-shot semantic segmentation meta-learner built on multi-layer
//! cosine-similarity correspondence, channel attention, masked-average
//! prototypes and a prior mask, decoded through a dilated ASPP head.
//!
//! The crate is self-contained: dense tensors with a small reverse-mode
//! tape, a frozen random-weight backbone, a synthetic shapes dataset,
//! episodic SGD training and mIoU / FB-IoU evaluation.

pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod correspondence;
pub mod decoder;
pub mod episodes;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod guidance;
pub mod metrics;
pub mod model;
pub mod netpbm;
pub mod nn;
pub mod tensor;
pub mod train;
pub mod viz;

pub use autodiff::{Gradients, ParamId, ParamStore, Parameter, Tape, Var};
pub use backbone::{Backbone, BackboneConfig, BlockSpec, FeaturePyramid};
pub use checkpoint::Checkpoint;
pub use correspondence::{CorrelationStack, SqueezedSupport};
pub use episodes::{Dataset, Episode, FeatureBank, FoldSpec, Split, SyntheticConfig};
pub use error::{Error, Result};
pub use eval::{EvalConfig, EvalReport, OracleGt, Predictor};
pub use metrics::IouMode;
pub use model::{EpisodeFeatures, MetaLearner, ModelConfig, ModuleToggles, SupportFeatures};
pub use tensor::{ConvSpec, Real, Tensor};
pub use train::{LossLog, TrainConfig};
