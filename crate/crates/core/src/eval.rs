//! Multi-run episodic evaluation on the held-out fold.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::episodes::{sample_episode, Dataset, Episode, FeatureBank, FoldSpec, Split};
use crate::error::{Error, Result};
use crate::metrics::{self, IouMode};
use crate::model::MetaLearner;

/// Anything that maps an episode to a binary query mask.
pub trait Predictor: Sync {
    fn predict(&self, dataset: &Dataset, bank: &FeatureBank, episode: &Episode) -> Result<Vec<u8>>;
}

impl Predictor for MetaLearner<f32> {
    fn predict(&self, dataset: &Dataset, bank: &FeatureBank, episode: &Episode) -> Result<Vec<u8>> {
        self.predict_mask(&bank.episode(dataset, episode))
    }
}

/// Returns the query's ground-truth mask.
pub struct OracleGt;

impl Predictor for OracleGt {
    fn predict(&self, dataset: &Dataset, _: &FeatureBank, episode: &Episode) -> Result<Vec<u8>> {
        Ok(binary(dataset, episode.query))
    }
}

fn binary(dataset: &Dataset, i: usize) -> Vec<u8> {
    dataset.mask(i).data().iter().map(|&v| (v > 0.5) as u8).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub episodes_per_run: usize,
    pub runs: usize,
    pub base_seed: u64,
    pub shots: usize,
    pub mode: IouMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            episodes_per_run: 1000,
            runs: 5,
            base_seed: 0,
            shots: 1,
            mode: IouMode::Pooled,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub seed: u64,
    pub per_class: BTreeMap<u32, f64>,
    pub miou: f64,
    pub fbiou: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub fold: usize,
    pub episodes_per_run: usize,
    pub runs: Vec<RunResult>,
    pub mean_per_class: BTreeMap<u32, f64>,
    pub mean_miou: f64,
    pub mean_fbiou: f64,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(
            s,
            "fold {}: {} runs x {} episodes",
            self.fold,
            self.runs.len(),
            self.episodes_per_run
        )
        .unwrap();
        for (i, r) in self.runs.iter().enumerate() {
            writeln!(s, "run {i} (seed {}): mIoU {:.4}  FB-IoU {:.4}", r.seed, r.miou, r.fbiou).unwrap();
        }
        for (c, iou) in &self.mean_per_class {
            writeln!(s, "class {c}: IoU {iou:.4}").unwrap();
        }
        writeln!(s, "mean: mIoU {:.4}  FB-IoU {:.4}", self.mean_miou, self.mean_fbiou).unwrap();
        s
    }

    /// One row per (run, class), then one `mean` row per class.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("fold,run,seed,class_id,iou,miou,fbiou\n");
        for (i, r) in self.runs.iter().enumerate() {
            for (c, iou) in &r.per_class {
                writeln!(s, "{},{i},{},{c},{iou:.6},{:.6},{:.6}", self.fold, r.seed, r.miou, r.fbiou).unwrap();
            }
        }
        for (c, iou) in &self.mean_per_class {
            writeln!(s, "{},mean,,{c},{iou:.6},{:.6},{:.6}", self.fold, self.mean_miou, self.mean_fbiou).unwrap();
        }
        s
    }
}

/// The test-fold episodes of run `run`, in evaluation order.
pub fn run_episodes(dataset: &Dataset, folds: &FoldSpec, cfg: &EvalConfig, run: usize) -> Result<Vec<Episode>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.base_seed.wrapping_add(run as u64));
    (0..cfg.episodes_per_run)
        .map(|_| sample_episode(dataset, folds, Split::Test, cfg.shots, &mut rng))
        .collect()
}

/// Evaluate `predictor` over `cfg.runs` runs with seeds
/// `base_seed, base_seed + 1, ...`. Episodes are predicted in parallel and
/// merged by index.
pub fn evaluate<P: Predictor>(
    predictor: &P,
    dataset: &Dataset,
    bank: &FeatureBank,
    folds: &FoldSpec,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if cfg.runs == 0 || cfg.episodes_per_run == 0 {
        return Err(Error::Config("eval_runs and eval_episodes must be positive".into()));
    }
    let fold_classes = folds.classes(Split::Test);
    let mut runs = Vec::with_capacity(cfg.runs);
    for run in 0..cfg.runs {
        let episodes = run_episodes(dataset, folds, cfg, run)?;
        let preds = episodes
            .par_iter()
            .map(|e| predictor.predict(dataset, bank, e))
            .collect::<Result<Vec<_>>>()?;
        let gts: Vec<Vec<u8>> = episodes.iter().map(|e| binary(dataset, e.query)).collect();
        let classes: Vec<u32> = episodes.iter().map(|e| e.class_id).collect();
        let class_iou = metrics::miou(&preds, &gts, &classes, &fold_classes, cfg.mode)?;
        runs.push(RunResult {
            seed: cfg.base_seed.wrapping_add(run as u64),
            per_class: class_iou.per_class,
            miou: class_iou.miou,
            fbiou: metrics::fbiou(&preds, &gts)?,
        });
    }

    let n = runs.len() as f64;
    let mut mean_per_class: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
    for r in &runs {
        for (&c, &iou) in &r.per_class {
            let slot = mean_per_class.entry(c).or_default();
            slot.0 += iou;
            slot.1 += 1;
        }
    }
    Ok(EvalReport {
        fold: folds.fold_index,
        episodes_per_run: cfg.episodes_per_run,
        mean_per_class: mean_per_class.into_iter().map(|(c, (s, k))| (c, s / k as f64)).collect(),
        mean_miou: runs.iter().map(|r| r.miou).sum::<f64>() / n,
        mean_fbiou: runs.iter().map(|r| r.fbiou).sum::<f64>() / n,
        runs,
    })
}
