//! Episodic BCE training with momentum SGD.

use std::fmt::Write as _;

use log::{debug, info};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{Gradients, ParamStore, Tape};
use crate::episodes::{sample_episode, Dataset, FeatureBank, FoldSpec, Split};
use crate::error::{Error, Result};
use crate::model::MetaLearner;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    /// Episodes per optimizer step.
    pub batch: usize,
    /// Total episode budget.
    pub episodes: usize,
    pub shots: usize,
    pub seed: u64,
    /// Rescale the batch gradient to this global L2 norm when it is larger.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-2,
            momentum: 0.9,
            batch: 8,
            episodes: 2000,
            shots: 1,
            seed: 0,
            clip_norm: Some(1.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0,1), got {}", self.momentum)));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        if self.shots == 0 {
            return Err(Error::Config("shots must be at least 1".into()));
        }
        Ok(())
    }

    /// Optimizer steps the episode budget allows; a trailing partial batch
    /// still counts as a step.
    pub fn steps(&self) -> usize {
        self.episodes.div_ceil(self.batch)
    }
}

/// Heavy-ball SGD: `v ← μ·v + g`, `w ← w − lr·v`.
pub struct Sgd<T> {
    lr: T,
    momentum: T,
    velocity: Vec<Tensor<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(store: &ParamStore<T>, lr: f64, momentum: f64) -> Self {
        Sgd {
            lr: T::lit(lr),
            momentum: T::lit(momentum),
            velocity: store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect(),
        }
    }

    /// Apply the stored gradients of trainable parameters, scaled by `scale`.
    pub fn step(&mut self, store: &mut ParamStore<T>, scale: T) {
        for (p, v) in store.iter_mut().zip(&mut self.velocity) {
            if !p.trainable {
                continue;
            }
            for ((w, g), vel) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(v.data_mut()) {
                *vel = self.momentum * *vel + *g * scale;
                *w -= self.lr * *vel;
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossLog {
    /// Mean batch loss per optimizer step.
    pub losses: Vec<f64>,
    /// Global L2 norm of each step's mean gradient, before clipping.
    pub grad_norms: Vec<f64>,
    pub batch: usize,
}

impl LossLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            writeln!(s, "{i},{l:.6}").expect("string write");
        }
        s
    }

    /// Trailing moving average over `window` steps.
    pub fn smoothed(&self, window: usize) -> Vec<f64> {
        let window = window.max(1);
        let mut out = Vec::with_capacity(self.losses.len());
        let mut acc = 0.0;
        for (i, &l) in self.losses.iter().enumerate() {
            acc += l;
            if i >= window {
                acc -= self.losses[i - window];
            }
            out.push(acc / (i + 1).min(window) as f64);
        }
        out
    }

    /// Steps covering roughly 100 episodes.
    pub fn default_window(&self) -> usize {
        100usize.div_ceil(self.batch.max(1))
    }
}

/// Loss and gradients of one episode.
fn episode_gradients(
    model: &MetaLearner<f32>,
    dataset: &Dataset,
    bank: &FeatureBank,
    episode: &crate::episodes::Episode,
) -> Result<(f64, Gradients<f32>)> {
    let features = bank.episode(dataset, episode);
    let mut tape = Tape::new();
    let (loss, _) = model.loss(&mut tape, &features, dataset.mask(episode.query))?;
    let value = tape.value(loss).data()[0].as_f64();
    let grads = tape.backward(loss)?;
    Ok((value, grads))
}

/// Train `model` in place on the train split of `folds`. The episode stream
/// depends only on `cfg.seed`, and per-episode gradients are summed in
/// episode order, so results do not depend on the rayon pool size.
pub fn train(
    model: &mut MetaLearner<f32>,
    dataset: &Dataset,
    bank: &FeatureBank,
    folds: &FoldSpec,
    cfg: &TrainConfig,
) -> Result<LossLog> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sgd = Sgd::new(model.params(), cfg.lr, cfg.momentum);
    let mut log = LossLog {
        losses: Vec::with_capacity(cfg.steps()),
        grad_norms: Vec::with_capacity(cfg.steps()),
        batch: cfg.batch,
    };
    let mut remaining = cfg.episodes;
    for step in 0..cfg.steps() {
        let n = remaining.min(cfg.batch);
        remaining -= n;
        let episodes = (0..n)
            .map(|_| sample_episode(dataset, folds, Split::Train, cfg.shots, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let results = episodes
            .par_iter()
            .map(|e| episode_gradients(model, dataset, bank, e))
            .collect::<Result<Vec<_>>>()?;

        let loss = results.iter().map(|(l, _)| l).sum::<f64>() / n as f64;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, loss, lr: cfg.lr });
        }
        let store = model.params_mut();
        store.zero_grad();
        for (_, g) in &results {
            store.accumulate(g)?;
        }
        let norm = store
            .iter()
            .filter(|(_, p)| p.trainable)
            .flat_map(|(_, p)| p.grad.data())
            .map(|&g| (g as f64).powi(2))
            .sum::<f64>()
            .sqrt()
            / n as f64;
        let mut scale = 1.0 / n as f64;
        if let Some(clip) = cfg.clip_norm {
            if norm > clip {
                scale *= clip / norm;
            }
        }
        sgd.step(store, scale as f32);
        log.losses.push(loss);
        log.grad_norms.push(norm);
        if step % 25 == 0 {
            debug!("step {step}: loss {loss:.4}");
        }
    }
    if let Some(last) = log.losses.last() {
        info!("trained {} steps, final loss {last:.4}", log.losses.len());
    }
    Ok(log)
}
