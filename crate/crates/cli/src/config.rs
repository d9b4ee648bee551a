//! `key = value` run configuration.

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use msanet_core::metrics::IouMode;
use msanet_core::{
    BackboneConfig, BlockSpec, EvalConfig, ModelConfig, ModuleToggles, SyntheticConfig, TrainConfig,
};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn err<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub out: PathBuf,
    pub seed: u64,

    pub classes: usize,
    pub samples_per_class: usize,
    pub image_size: usize,
    pub distractor_prob: f64,

    pub stem_stride: usize,
    pub stem_channels: usize,
    pub block_channels: Vec<usize>,
    pub block_bottlenecks: Vec<usize>,
    pub block_dilations: Vec<usize>,

    pub multi_similarity: bool,
    pub attention: bool,
    pub prototype: bool,
    pub prior_mask: bool,
    pub alpha: usize,
    pub merged_channels: usize,
    pub decoder_channels: usize,
    pub aspp_rates: Vec<usize>,

    pub lr: f64,
    pub momentum: f64,
    pub grad_clip: Option<f64>,
    pub batch: usize,
    pub episodes: usize,
    pub shots: usize,

    pub fold: usize,
    pub folds: usize,
    pub workers: usize,
    pub eval_episodes: usize,
    pub eval_runs: usize,
    pub iou_mode: IouMode,
    pub checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synthetic = SyntheticConfig::default();
        let backbone = BackboneConfig::default();
        let model = ModelConfig::default();
        let train = TrainConfig::default();
        let eval = EvalConfig::default();
        RunConfig {
            dataset: PathBuf::from("data"),
            out: PathBuf::from("run"),
            seed: 0,
            classes: synthetic.classes,
            samples_per_class: synthetic.samples_per_class,
            image_size: synthetic.image_size,
            distractor_prob: synthetic.distractor_prob,
            stem_stride: backbone.stem_stride,
            stem_channels: backbone.stem_channels,
            block_channels: backbone.blocks.iter().map(|b| b.channels).collect(),
            block_bottlenecks: backbone.blocks.iter().map(|b| b.bottlenecks).collect(),
            block_dilations: backbone.blocks.iter().map(|b| b.dilation).collect(),
            multi_similarity: model.toggles.multi_similarity,
            attention: model.toggles.attention,
            prototype: model.toggles.prototype,
            prior_mask: model.toggles.prior_mask,
            alpha: model.alpha,
            merged_channels: model.merged_channels,
            decoder_channels: model.decoder_channels,
            aspp_rates: model.aspp_rates,
            lr: train.lr,
            momentum: train.momentum,
            grad_clip: train.clip_norm,
            batch: train.batch,
            episodes: train.episodes,
            shots: train.shots,
            fold: 0,
            folds: 4,
            workers: 0,
            eval_episodes: eval.episodes_per_run,
            eval_runs: eval.runs,
            iou_mode: eval.mode,
            checkpoint: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value
        .parse()
        .or_else(|_| err(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => err(format!("{key}: expected true/false, got {value:?}")),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>, ConfigError> {
    value
        .split(',')
        .map(|v| parse(key, v.trim()))
        .collect()
}

fn join(values: &[usize]) -> String {
    values.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Read a config file. Keys it does not set keep their defaults.
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .or_else(|e| err(format!("{}: {e}", path.display())))?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text)
            .map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return err(format!("line {}: expected `key = value`, got {line:?}", n + 1));
            };
            self.set(key.trim(), value.trim())
                .map_err(|e| ConfigError(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    /// Apply `--key value` / `--key=value` pairs. Dashes in keys are read
    /// as underscores.
    pub fn apply_overrides(&mut self, args: &[String]) -> Result<(), ConfigError> {
        let mut it = args.iter();
        while let Some(arg) = it.next() {
            let Some(flag) = arg.strip_prefix("--") else {
                return err(format!("unexpected argument {arg:?}; overrides look like --key value"));
            };
            let (key, value) = match flag.split_once('=') {
                Some((k, v)) => (k.to_string(), v.to_string()),
                None => match it.next() {
                    Some(v) => (flag.to_string(), v.clone()),
                    None => return err(format!("{flag}: missing value")),
                },
            };
            self.set(&key.replace('-', "_"), &value)?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "dataset" => self.dataset = PathBuf::from(value),
            "out" => self.out = PathBuf::from(value),
            "seed" => self.seed = parse(key, value)?,
            "classes" => self.classes = parse(key, value)?,
            "samples_per_class" => self.samples_per_class = parse(key, value)?,
            "image_size" => self.image_size = parse(key, value)?,
            "distractor_prob" => self.distractor_prob = parse(key, value)?,
            "stem_stride" => self.stem_stride = parse(key, value)?,
            "stem_channels" => self.stem_channels = parse(key, value)?,
            "block_channels" => self.block_channels = parse_list(key, value)?,
            "block_bottlenecks" => self.block_bottlenecks = parse_list(key, value)?,
            "block_dilations" => self.block_dilations = parse_list(key, value)?,
            "multi_similarity" => self.multi_similarity = parse_bool(key, value)?,
            "attention" => self.attention = parse_bool(key, value)?,
            "prototype" => self.prototype = parse_bool(key, value)?,
            "prior_mask" => self.prior_mask = parse_bool(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "merged_channels" => self.merged_channels = parse(key, value)?,
            "decoder_channels" => self.decoder_channels = parse(key, value)?,
            "aspp_rates" => self.aspp_rates = parse_list(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "grad_clip" => {
                self.grad_clip = match value {
                    "none" | "off" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "batch" => self.batch = parse(key, value)?,
            "episodes" => self.episodes = parse(key, value)?,
            "shots" => self.shots = parse(key, value)?,
            "fold" => self.fold = parse(key, value)?,
            "folds" => self.folds = parse(key, value)?,
            "workers" => self.workers = parse(key, value)?,
            "eval_episodes" => self.eval_episodes = parse(key, value)?,
            "eval_runs" => self.eval_runs = parse(key, value)?,
            "iou_mode" => {
                self.iou_mode = value
                    .parse()
                    .or_else(|_| err(format!("iou_mode: expected pooled or per_episode, got {value:?}")))?
            }
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            _ => return err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Range checks, each naming the offending key.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("classes", self.classes),
            ("samples_per_class", self.samples_per_class),
            ("stem_stride", self.stem_stride),
            ("alpha", self.alpha),
            ("merged_channels", self.merged_channels),
            ("decoder_channels", self.decoder_channels),
            ("batch", self.batch),
            ("shots", self.shots),
            ("folds", self.folds),
            ("eval_episodes", self.eval_episodes),
            ("eval_runs", self.eval_runs),
        ];
        for (key, v) in positive {
            if v == 0 {
                return err(format!("{key}: must be at least 1"));
            }
        }
        if self.classes > 8 {
            return err(format!("classes: at most 8 shape classes exist, got {}", self.classes));
        }
        if self.image_size < 16 {
            return err(format!("image_size: must be at least 16, got {}", self.image_size));
        }
        if !(0.0..=1.0).contains(&self.distractor_prob) {
            return err(format!("distractor_prob: must lie in [0,1], got {}", self.distractor_prob));
        }
        if !self.stem_stride.is_power_of_two() || self.image_size % self.stem_stride != 0 {
            return err(format!(
                "stem_stride: must be a power of two dividing image_size {}, got {}",
                self.image_size, self.stem_stride
            ));
        }
        if self.stem_stride > 1 && self.stem_channels == 0 {
            return err("stem_channels: must be at least 1");
        }
        let n = self.block_channels.len();
        if n == 0 {
            return err("block_channels: at least one block is required");
        }
        if self.block_bottlenecks.len() != n || self.block_dilations.len() != n {
            return err(format!(
                "block_bottlenecks/block_dilations: need {n} entries to match block_channels"
            ));
        }
        for (key, list) in [
            ("block_channels", &self.block_channels),
            ("block_bottlenecks", &self.block_bottlenecks),
            ("block_dilations", &self.block_dilations),
            ("aspp_rates", &self.aspp_rates),
        ] {
            if list.contains(&0) {
                return err(format!("{key}: entries must be at least 1"));
            }
        }
        if self.aspp_rates.is_empty() {
            return err("aspp_rates: at least one rate is required");
        }
        if !(self.multi_similarity || self.attention || self.prototype || self.prior_mask) {
            return err(
                "multi_similarity/attention/prototype/prior_mask: all guidance modules are off",
            );
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return err(format!("lr: must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return err(format!("momentum: must lie in [0,1), got {}", self.momentum));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return err(format!("grad_clip: must be positive or none, got {c}"));
            }
        }
        if self.folds > self.classes {
            return err(format!("folds: {} folds need at least as many classes, got {}", self.folds, self.classes));
        }
        if self.fold >= self.folds {
            return err(format!("fold: must be below folds ({}), got {}", self.folds, self.fold));
        }
        Ok(())
    }

    pub fn synthetic(&self) -> SyntheticConfig {
        SyntheticConfig {
            classes: self.classes,
            samples_per_class: self.samples_per_class,
            image_size: self.image_size,
            distractor_prob: self.distractor_prob,
            seed: self.seed,
        }
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            input_size: (self.image_size, self.image_size),
            stem_stride: self.stem_stride,
            stem_channels: self.stem_channels,
            blocks: self
                .block_channels
                .iter()
                .zip(&self.block_bottlenecks)
                .zip(&self.block_dilations)
                .map(|((&channels, &bottlenecks), &dilation)| BlockSpec {
                    channels,
                    bottlenecks,
                    dilation,
                })
                .collect(),
            seed: self.seed,
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            alpha: self.alpha,
            merged_channels: self.merged_channels,
            decoder_channels: self.decoder_channels,
            aspp_rates: self.aspp_rates.clone(),
            toggles: ModuleToggles {
                multi_similarity: self.multi_similarity,
                attention: self.attention,
                prototype: self.prototype,
                prior_mask: self.prior_mask,
            },
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            momentum: self.momentum,
            batch: self.batch,
            episodes: self.episodes,
            shots: self.shots,
            seed: self.seed,
            clip_norm: self.grad_clip,
        }
    }

    pub fn eval(&self) -> EvalConfig {
        EvalConfig {
            episodes_per_run: self.eval_episodes,
            runs: self.eval_runs,
            base_seed: self.seed,
            shots: self.shots,
            mode: self.iou_mode,
        }
    }

    /// Render every key, in the format [`RunConfig::apply_text`] reads.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("string write");
        kv("dataset", self.dataset.display().to_string());
        kv("out", self.out.display().to_string());
        kv("seed", self.seed.to_string());
        kv("classes", self.classes.to_string());
        kv("samples_per_class", self.samples_per_class.to_string());
        kv("image_size", self.image_size.to_string());
        kv("distractor_prob", self.distractor_prob.to_string());
        kv("stem_stride", self.stem_stride.to_string());
        kv("stem_channels", self.stem_channels.to_string());
        kv("block_channels", join(&self.block_channels));
        kv("block_bottlenecks", join(&self.block_bottlenecks));
        kv("block_dilations", join(&self.block_dilations));
        kv("multi_similarity", self.multi_similarity.to_string());
        kv("attention", self.attention.to_string());
        kv("prototype", self.prototype.to_string());
        kv("prior_mask", self.prior_mask.to_string());
        kv("alpha", self.alpha.to_string());
        kv("merged_channels", self.merged_channels.to_string());
        kv("decoder_channels", self.decoder_channels.to_string());
        kv("aspp_rates", join(&self.aspp_rates));
        kv("lr", self.lr.to_string());
        kv("momentum", self.momentum.to_string());
        kv("grad_clip", self.grad_clip.map_or("none".into(), |c| c.to_string()));
        kv("batch", self.batch.to_string());
        kv("episodes", self.episodes.to_string());
        kv("shots", self.shots.to_string());
        kv("fold", self.fold.to_string());
        kv("folds", self.folds.to_string());
        kv("workers", self.workers.to_string());
        kv("eval_episodes", self.eval_episodes.to_string());
        kv("eval_runs", self.eval_runs.to_string());
        kv(
            "iou_mode",
            match self.iou_mode {
                IouMode::Pooled => "pooled".into(),
                IouMode::PerEpisode => "per_episode".into(),
            },
        );
        if let Some(c) = &self.checkpoint {
            kv("checkpoint", c.display().to_string());
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig {
            grad_clip: None,
            iou_mode: IouMode::PerEpisode,
            checkpoint: Some("w.msaw".into()),
            ..RunConfig::default()
        };
        cfg.aspp_rates = vec![1, 3];
        let mut back = RunConfig::default();
        back.apply_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn defaults_validate_and_match_core() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.backbone(), BackboneConfig::default());
        assert_eq!(cfg.model(), ModelConfig::default());
        assert_eq!(cfg.train(), TrainConfig::default());
        assert_eq!(cfg.eval(), EvalConfig::default());
        assert_eq!(cfg.synthetic(), SyntheticConfig::default());
    }

    #[test]
    fn comments_and_blank_lines() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("# header\n\nlr = 0.01  # smaller\n  attention=off\n").unwrap();
        assert_eq!(cfg.lr, 0.01);
        assert!(!cfg.attention);
    }

    #[test]
    fn unknown_key_is_named() {
        let e = RunConfig::default().apply_text("lr = 0.1\nlearning_rate = 3\n").unwrap_err();
        assert!(e.0.contains("line 2") && e.0.contains("learning_rate"), "{e}");
    }

    #[test]
    fn bad_values_name_the_key() {
        let mut cfg = RunConfig::default();
        assert!(cfg.set("batch", "eight").unwrap_err().0.starts_with("batch"));
        cfg.set("momentum", "1.5").unwrap();
        assert!(cfg.validate().unwrap_err().0.starts_with("momentum"));

        let mut cfg = RunConfig::default();
        cfg.set("fold", "4").unwrap();
        assert!(cfg.validate().unwrap_err().0.starts_with("fold:"));

        let mut cfg = RunConfig::default();
        cfg.set("block_dilations", "1,2").unwrap();
        assert!(cfg.validate().unwrap_err().0.contains("block_dilations"));
    }

    #[test]
    fn all_modules_off_is_rejected() {
        let mut cfg = RunConfig::default();
        for k in ["multi_similarity", "attention", "prototype", "prior_mask"] {
            cfg.set(k, "false").unwrap();
        }
        assert!(cfg.validate().unwrap_err().0.contains("guidance modules are off"));
    }

    #[test]
    fn overrides() {
        let mut cfg = RunConfig::default();
        let args: Vec<String> = ["--episodes", "0", "--grad-clip=none", "--aspp_rates", "1,2"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        cfg.apply_overrides(&args).unwrap();
        assert_eq!((cfg.episodes, cfg.grad_clip), (0, None));
        assert_eq!(cfg.aspp_rates, vec![1, 2]);
        assert!(cfg.apply_overrides(&["--lr".into()]).is_err());
        assert!(cfg.apply_overrides(&["lr".into(), "1".into()]).is_err());
    }
}
