use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use msanet_core::episodes::{self, MANIFEST_FILE};
use msanet_core::eval::{self, Predictor};
use msanet_core::netpbm::{self, Raster};
use msanet_core::{
    train, viz, Backbone, Checkpoint, Dataset, Episode, EpisodeFeatures, Error, FeatureBank, FoldSpec,
    MetaLearner, OracleGt, Split, SupportFeatures,
};
use rand::SeedableRng;

use crate::config::{ConfigError, RunConfig};

/// A message plus the process exit code: 1 for usage and configuration
/// problems, 2 for everything that fails at run time.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn runtime(message: impl Into<String>) -> Self {
        Failure { code: 2, message: message.into() }
    }

    fn usage(message: impl Into<String>) -> Self {
        Failure { code: 1, message: message.into() }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::usage(e.0)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::usage(e.to_string()),
            e => Failure::runtime(e.to_string()),
        }
    }
}

type Outcome = Result<(), Failure>;

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Outcome {
    fs::write(path, bytes).map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Outcome {
    fs::create_dir_all(path).map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))
}

fn checkpoint_path(cfg: &RunConfig) -> PathBuf {
    cfg.checkpoint.clone().unwrap_or_else(|| cfg.out.join("checkpoint.msaw"))
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset, Failure> {
    let dataset = episodes::load_dataset(&cfg.dataset)?;
    let size = (cfg.image_size, cfg.image_size);
    if dataset.image_size != size {
        return Err(Failure::usage(format!(
            "image_size: config says {}, dataset {} holds {}x{} images",
            cfg.image_size,
            cfg.dataset.display(),
            dataset.image_size.0,
            dataset.image_size.1
        )));
    }
    Ok(dataset)
}

fn fold_spec(cfg: &RunConfig, dataset: &Dataset) -> Result<FoldSpec, Failure> {
    Ok(FoldSpec::new(dataset.classes(), cfg.folds, cfg.fold)?)
}

/// Backbone and head with weights from the configured checkpoint.
fn load_model(cfg: &RunConfig) -> Result<(Backbone<f32>, MetaLearner<f32>), Failure> {
    let path = checkpoint_path(cfg);
    let checkpoint = Checkpoint::load(&path)?;
    let mut backbone = Backbone::build(&cfg.backbone())?;
    let mut model = MetaLearner::new(&cfg.model(), backbone.config(), cfg.seed)?;
    checkpoint
        .apply(&mut model, &mut backbone)
        .map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))?;
    Ok((backbone, model))
}

pub fn generate(cfg: &RunConfig, out_given: bool) -> Outcome {
    let dir = if out_given { &cfg.out } else { &cfg.dataset };
    let dataset = episodes::generate_synthetic_dataset(&cfg.synthetic(), dir)?;
    let read = |path: &Path| fs::read(path).map_err(|e| Failure::runtime(format!("{}: {e}", path.display())));
    let manifest = read(&dir.join(MANIFEST_FILE))?;
    let mut content = crc32fast::Hasher::new();
    content.update(&manifest);
    for e in &dataset.entries {
        content.update(&read(&dir.join(&e.image))?);
        content.update(&read(&dir.join(&e.mask))?);
    }
    println!(
        "wrote {} samples ({} classes, {}x{}) to {}",
        dataset.len(),
        dataset.classes().len(),
        dataset.image_size.0,
        dataset.image_size.1,
        dir.display()
    );
    println!("manifest crc32 {:08x}", crc32fast::hash(&manifest));
    println!("content crc32 {:08x}", content.finalize());
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Outcome {
    let dataset = load_dataset(cfg)?;
    let folds = fold_spec(cfg, &dataset)?;
    let backbone = Backbone::build(&cfg.backbone())?;
    let mut model = MetaLearner::new(&cfg.model(), backbone.config(), cfg.seed)?;
    let bank = FeatureBank::build(&backbone, &dataset)?;
    info!("features cached for {} samples", dataset.len());
    let log = train::train(&mut model, &dataset, &bank, &folds, &cfg.train())?;

    create_dir(&cfg.out)?;
    let checkpoint = Checkpoint::from_parts(&model, &backbone);
    let path = checkpoint_path(cfg);
    checkpoint.save(&path)?;
    write(&cfg.out.join("loss.csv"), log.to_csv())?;
    write(&cfg.out.join("config.txt"), cfg.to_text())?;

    let smoothed = log.smoothed(log.default_window());
    match (smoothed.first(), smoothed.last()) {
        (Some(a), Some(b)) => println!("{} steps, smoothed loss {a:.4} -> {b:.4}", log.losses.len()),
        _ => println!("0 steps; checkpoint holds the initial weights"),
    }
    println!("checkpoint {} crc32 {:08x}", path.display(), checkpoint.crc()?);
    Ok(())
}

fn mask_raster(size: (usize, usize), mask: &[u8]) -> Raster {
    Raster::gray(size.1, size.0, mask.iter().map(|&v| v * 255).collect())
}

fn dump_masks<P: Predictor>(
    predictor: &P,
    dataset: &Dataset,
    bank: &FeatureBank,
    folds: &FoldSpec,
    cfg: &RunConfig,
) -> Outcome {
    let dir = cfg.out.join("masks");
    create_dir(&dir)?;
    let eval_cfg = cfg.eval();
    for run in 0..eval_cfg.runs {
        for (i, e) in eval::run_episodes(dataset, folds, &eval_cfg, run)?.iter().enumerate() {
            let pred = predictor.predict(dataset, bank, e)?;
            let gt: Vec<u8> = dataset.mask(e.query).data().iter().map(|&v| (v > 0.5) as u8).collect();
            let stem = format!("run{run}_{i:04}_q{}", e.query);
            mask_raster(dataset.image_size, &pred).write(&dir.join(format!("{stem}_pred.pgm")))?;
            mask_raster(dataset.image_size, &gt).write(&dir.join(format!("{stem}_gt.pgm")))?;
        }
    }
    Ok(())
}

fn score<P: Predictor>(
    predictor: &P,
    dataset: &Dataset,
    bank: &FeatureBank,
    folds: &FoldSpec,
    cfg: &RunConfig,
    masks: bool,
) -> Outcome {
    let report = eval::evaluate(predictor, dataset, bank, folds, &cfg.eval())?;
    create_dir(&cfg.out)?;
    write(&cfg.out.join("eval.txt"), report.to_text())?;
    write(&cfg.out.join("eval.csv"), report.to_csv())?;
    if masks {
        dump_masks(predictor, dataset, bank, folds, cfg)?;
    }
    print!("{}", report.to_text());
    Ok(())
}

pub fn eval(cfg: &RunConfig, oracle_gt: bool, masks: bool) -> Outcome {
    let dataset = load_dataset(cfg)?;
    let folds = fold_spec(cfg, &dataset)?;
    if oracle_gt {
        let backbone = Backbone::build(&cfg.backbone())?;
        let bank = FeatureBank::build(&backbone, &dataset)?;
        return score(&OracleGt, &dataset, &bank, &folds, cfg, masks);
    }
    let (backbone, model) = load_model(cfg)?;
    let bank = FeatureBank::build(&backbone, &dataset)?;
    score(&model, &dataset, &bank, &folds, cfg, masks)
}

fn select_episode(
    cfg: &RunConfig,
    dataset: &Dataset,
    query: Option<usize>,
    support: &[usize],
) -> Result<Episode, Failure> {
    let Some(query) = query else {
        let folds = fold_spec(cfg, dataset)?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
        return Ok(episodes::sample_episode(dataset, &folds, Split::Test, cfg.shots, &mut rng)?);
    };
    let entry = dataset
        .entries
        .get(query)
        .ok_or_else(|| Failure::usage(format!("--query {query}: dataset has {} samples", dataset.len())))?;
    let class_id = entry.class_id;
    let support: Vec<usize> = if support.is_empty() {
        dataset
            .samples_of(class_id)
            .iter()
            .copied()
            .filter(|&i| i != query)
            .take(cfg.shots)
            .collect()
    } else {
        support.to_vec()
    };
    for &s in &support {
        match dataset.entries.get(s) {
            Some(e) if e.class_id == class_id => {}
            Some(e) => {
                return Err(Failure::usage(format!(
                    "--support {s}: class {} differs from the query's class {class_id}",
                    e.class_id
                )))
            }
            None => return Err(Failure::usage(format!("--support {s}: dataset has {} samples", dataset.len()))),
        }
    }
    if support.is_empty() {
        return Err(Failure::usage(format!("class {class_id} has no other sample to use as support")));
    }
    Ok(Episode { class_id, support, query })
}

pub fn viz(cfg: &RunConfig, query: Option<usize>, support: &[usize]) -> Outcome {
    let dataset = load_dataset(cfg)?;
    let episode = select_episode(cfg, &dataset, query, support)?;
    let (backbone, model) = load_model(cfg)?;
    let query_features = backbone.extract_features(dataset.image(episode.query))?;
    let support_features = episode
        .support
        .iter()
        .map(|&s| backbone.extract_features(dataset.image(s)))
        .collect::<Result<Vec<_>, _>>()?;
    let features = EpisodeFeatures {
        query: &query_features,
        supports: support_features
            .iter()
            .zip(&episode.support)
            .map(|(pyramid, &s)| SupportFeatures { pyramid, mask: dataset.mask(s) })
            .collect(),
        out_size: dataset.image_size,
    };
    let maps = viz::episode_maps(&model, &features)?;

    create_dir(&cfg.out)?;
    let (h, w) = query_features.spatial_size();
    for (b, energy) in maps.block_energy.iter().enumerate() {
        netpbm::normalized_gray(w, h, energy.data()).write(&cfg.out.join(format!("corr_b{}.pgm", b + 2)))?;
    }
    netpbm::normalized_gray(w, h, maps.prior.data()).write(&cfg.out.join("prior.pgm"))?;
    mask_raster(dataset.image_size, &maps.pred).write(&cfg.out.join("pred.pgm"))?;
    println!(
        "episode class {} query {} supports {:?}; maps written to {}",
        episode.class_id,
        episode.query,
        episode.support,
        cfg.out.display()
    );
    Ok(())
}
