//! Synthetic shapes dataset, its on-disk layout, class folds and episodic
//! support/query sampling.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::backbone::{Backbone, FeaturePyramid};
use crate::error::{Error, Result};
use crate::model::{EpisodeFeatures, SupportFeatures};
use crate::netpbm::Raster;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Ring,
    Cross,
    Bar,
    Ellipse,
    Star,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 8] = [
        ShapeKind::Circle,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Ring,
        ShapeKind::Cross,
        ShapeKind::Bar,
        ShapeKind::Ellipse,
        ShapeKind::Star,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Ring => "ring",
            ShapeKind::Cross => "cross",
            ShapeKind::Bar => "bar",
            ShapeKind::Ellipse => "ellipse",
            ShapeKind::Star => "star",
        }
    }

    /// Whether the point `(u, v)`, in shape-local units where the shape fits
    /// the unit disc, lies inside.
    fn contains(self, u: f64, v: f64) -> bool {
        let rho2 = u * u + v * v;
        match self {
            ShapeKind::Circle => rho2 <= 1.0,
            ShapeKind::Square => u.abs() <= 0.75 && v.abs() <= 0.75,
            ShapeKind::Triangle => in_polygon(u, v, &regular_star(3, 1.0, None)),
            ShapeKind::Ring => (0.3025..=1.0).contains(&rho2),
            ShapeKind::Cross => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
            ShapeKind::Bar => u.abs() <= 1.0 && v.abs() <= 0.28,
            ShapeKind::Ellipse => u * u + (v / 0.55).powi(2) <= 1.0,
            ShapeKind::Star => in_polygon(u, v, &regular_star(5, 1.0, Some(0.45))),
        }
    }
}

fn regular_star(points: usize, outer: f64, inner: Option<f64>) -> Vec<(f64, f64)> {
    let step = if inner.is_some() { 2 * points } else { points };
    (0..step)
        .map(|i| {
            let r = match inner {
                Some(ri) if i % 2 == 1 => ri,
                _ => outer,
            };
            let t = std::f64::consts::TAU * i as f64 / step as f64 - std::f64::consts::FRAC_PI_2;
            (r * t.cos(), r * t.sin())
        })
        .collect()
}

fn in_polygon(x: f64, y: f64, poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// A shape instance in pixel coordinates.
#[derive(Clone, Copy, Debug)]
pub struct Placement {
    pub kind: ShapeKind,
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    pub angle: f64,
}

/// Row-major coverage of `placement` sampled at pixel centres.
pub fn rasterize(placement: &Placement, width: usize, height: usize) -> Vec<bool> {
    let (sin, cos) = placement.angle.sin_cos();
    let mut out = vec![false; width * height];
    for y in 0..height {
        for x in 0..width {
            let dx = (x as f64 + 0.5 - placement.cx) / placement.radius;
            let dy = (y as f64 + 0.5 - placement.cy) / placement.radius;
            let u = cos * dx + sin * dy;
            let v = -sin * dx + cos * dy;
            out[y * width + x] = placement.kind.contains(u, v);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub samples_per_class: usize,
    pub image_size: usize,
    pub distractor_prob: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            classes: 8,
            samples_per_class: 50,
            image_size: 64,
            distractor_prob: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.classes > ShapeKind::ALL.len() {
            return Err(Error::Config(format!(
                "classes must be in 1..={}, got {}",
                ShapeKind::ALL.len(),
                self.classes
            )));
        }
        if self.samples_per_class == 0 {
            return Err(Error::Config("samples_per_class must be positive".into()));
        }
        if self.image_size < 16 {
            return Err(Error::Config(format!("image_size must be at least 16, got {}", self.image_size)));
        }
        if !(0.0..=1.0).contains(&self.distractor_prob) {
            return Err(Error::Config(format!(
                "distractor_prob must be in [0,1], got {}",
                self.distractor_prob
            )));
        }
        Ok(())
    }
}

fn random_placement(kind: ShapeKind, size: usize, rng: &mut impl Rng) -> Placement {
    let s = size as f64;
    let radius = rng.random_range(s / 8.0..=s * 18.0 / 64.0);
    let margin = radius * 0.6;
    Placement {
        kind,
        cx: rng.random_range(margin..s - margin),
        cy: rng.random_range(margin..s - margin),
        radius,
        angle: rng.random_range(0.0..std::f64::consts::TAU),
    }
}

/// Base fill of each class; instances jitter around it.
const PALETTE: [[f64; 3]; 8] = [
    [220.0, 40.0, 40.0],
    [40.0, 200.0, 60.0],
    [50.0, 70.0, 230.0],
    [230.0, 210.0, 40.0],
    [210.0, 50.0, 210.0],
    [40.0, 210.0, 220.0],
    [240.0, 130.0, 30.0],
    [120.0, 60.0, 170.0],
];

fn class_color(class: usize, rng: &mut impl Rng) -> [f64; 3] {
    PALETTE[class].map(|c| c + rng.random_range(-35.0..35.0))
}

/// One rendered sample: RGB pixels and the target-class mask.
fn render_sample(class: usize, classes: usize, cfg: &SyntheticConfig, rng: &mut impl Rng) -> (Raster, Vec<bool>) {
    let n = cfg.image_size;
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(70.0..180.0));
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(-50.0..50.0));
    let freq = rng.random_range(0.1..0.6);
    let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let (st, ct) = theta.sin_cos();
    let mut rgb = vec![0f64; n * n * 3];
    for y in 0..n {
        for x in 0..n {
            let wave = ((x as f64 * ct + y as f64 * st) * freq).sin();
            for ch in 0..3 {
                let noise = rng.random_range(-40.0..40.0);
                rgb[(y * n + x) * 3 + ch] = base[ch] + tint[ch] * wave + noise;
            }
        }
    }

    let mut paint = |cover: &[bool], color: [f64; 3], rng: &mut dyn rand::RngCore| {
        for (p, &inside) in cover.iter().enumerate() {
            if inside {
                for ch in 0..3 {
                    rgb[p * 3 + ch] = color[ch] + rng.random_range(-6.0..6.0);
                }
            }
        }
    };

    if classes > 1 && rng.random_bool(cfg.distractor_prob) {
        let mut other = rng.random_range(0..classes - 1);
        if other >= class {
            other += 1;
        }
        let d = random_placement(ShapeKind::ALL[other], n, rng);
        let color = class_color(other, rng);
        paint(&rasterize(&d, n, n), color, rng);
    }
    let target = random_placement(ShapeKind::ALL[class], n, rng);
    let mask = rasterize(&target, n, n);
    let color = class_color(class, rng);
    paint(&mask, color, rng);

    let pixels = rgb.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
    (Raster::rgb(n, n, pixels), mask)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub class_id: u32,
}

/// A validated dataset with decoded images (`[3,H,W]`, values in `[-1,1]`)
/// and masks (`[1,H,W]`, values in `{0,1}`).
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub image_size: (usize, usize),
    images: Vec<Tensor<f32>>,
    masks: Vec<Tensor<f32>>,
    by_class: BTreeMap<u32, Vec<usize>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn image(&self, i: usize) -> &Tensor<f32> {
        &self.images[i]
    }

    pub fn mask(&self, i: usize) -> &Tensor<f32> {
        &self.masks[i]
    }

    /// Sorted class roster.
    pub fn classes(&self) -> Vec<u32> {
        self.by_class.keys().copied().collect()
    }

    pub fn samples_of(&self, class_id: u32) -> &[usize] {
        self.by_class.get(&class_id).map_or(&[], Vec::as_slice)
    }
}

fn image_tensor(r: &Raster) -> Tensor<f32> {
    let hw = r.width * r.height;
    Tensor::from_fn(&[3, r.height, r.width], |i| {
        let (ch, p) = (i / hw, i % hw);
        r.pixels[p * 3 + ch] as f32 / 127.5 - 1.0
    })
}

fn mask_tensor(r: &Raster) -> Tensor<f32> {
    Tensor::from_fn(&[1, r.height, r.width], |i| if r.pixels[i] == 255 { 1.0 } else { 0.0 })
}

/// Render `cfg.classes × cfg.samples_per_class` samples into `out_dir` and
/// load the result back.
pub fn generate_synthetic_dataset(cfg: &SyntheticConfig, out_dir: &Path) -> Result<Dataset> {
    cfg.validate()?;
    for sub in ["images", "masks"] {
        let dir = out_dir.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut manifest = String::from("# image mask class_id\n");
    for class in 0..cfg.classes {
        for i in 0..cfg.samples_per_class {
            let (image, cover) = render_sample(class, cfg.classes, cfg, &mut rng);
            let mask = Raster::gray(
                cfg.image_size,
                cfg.image_size,
                cover.iter().map(|&b| if b { 255 } else { 0 }).collect(),
            );
            let stem = format!("c{class}_{i:04}");
            let image_rel = format!("images/{stem}.ppm");
            let mask_rel = format!("masks/{stem}.pgm");
            image.write(&out_dir.join(&image_rel))?;
            mask.write(&out_dir.join(&mask_rel))?;
            writeln!(manifest, "{image_rel} {mask_rel} {class}").expect("string write");
        }
    }
    let path = out_dir.join(MANIFEST_FILE);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    load_dataset(out_dir)
}

/// Parse manifest text. `path` only labels errors.
pub fn parse_manifest(text: &str, path: &Path) -> Result<Vec<ManifestEntry>> {
    let mut entries = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fail = |reason: String| Error::Manifest {
            path: path.to_path_buf(),
            line: n + 1,
            reason,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [image, mask, class] = fields[..] else {
            return Err(fail(format!(
                "expected `<image> <mask> <class_id>`, found {} fields",
                fields.len()
            )));
        };
        let class_id = class
            .parse()
            .map_err(|_| fail(format!("class_id `{class}` is not a non-negative integer")))?;
        entries.push(ManifestEntry {
            image: image.into(),
            mask: mask.into(),
            class_id,
        });
    }
    Ok(entries)
}

/// Load and validate a dataset directory (or its `manifest.txt`).
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let (root, manifest_path) = if path.is_dir() {
        (path.to_path_buf(), path.join(MANIFEST_FILE))
    } else {
        (path.parent().unwrap_or(Path::new(".")).to_path_buf(), path.to_path_buf())
    };
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let entries = parse_manifest(&text, &manifest_path)?;
    if entries.is_empty() {
        return Err(Error::Dataset(format!("{} lists no samples", manifest_path.display())));
    }

    let decoded: Vec<(Tensor<f32>, Tensor<f32>, (usize, usize))> = entries
        .par_iter()
        .map(|e| load_pair(&root, e))
        .collect::<Result<_>>()?;
    let image_size = decoded[0].2;
    let mut images = Vec::with_capacity(entries.len());
    let mut masks = Vec::with_capacity(entries.len());
    let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, (img, mask, size)) in decoded.into_iter().enumerate() {
        if size != image_size {
            return Err(Error::Format {
                path: root.join(&entries[i].image),
                reason: format!("size {size:?} differs from the dataset's {image_size:?}"),
            });
        }
        images.push(img);
        masks.push(mask);
        by_class.entry(entries[i].class_id).or_default().push(i);
    }
    Ok(Dataset {
        root,
        entries,
        image_size,
        images,
        masks,
        by_class,
    })
}

fn load_pair(root: &Path, e: &ManifestEntry) -> Result<(Tensor<f32>, Tensor<f32>, (usize, usize))> {
    let image_path = root.join(&e.image);
    let mask_path = root.join(&e.mask);
    let image = Raster::read(&image_path)?;
    if image.channels != 3 {
        return Err(Error::Format {
            path: image_path,
            reason: "image must be a binary PPM (P6)".into(),
        });
    }
    let mask = Raster::read(&mask_path)?;
    let bad = |reason: String| Error::Format {
        path: mask_path.clone(),
        reason,
    };
    if mask.channels != 1 {
        return Err(bad("mask must be a binary PGM (P5)".into()));
    }
    if (mask.width, mask.height) != (image.width, image.height) {
        return Err(bad(format!(
            "mask is {}x{} but image is {}x{}",
            mask.width, mask.height, image.width, image.height
        )));
    }
    if let Some(p) = mask.pixels.iter().position(|&v| v != 0 && v != 255) {
        return Err(bad(format!(
            "mask value {} at pixel ({}, {}); only 0 and 255 are allowed",
            mask.pixels[p],
            p % mask.width,
            p / mask.width
        )));
    }
    if !mask.pixels.contains(&255) {
        return Err(bad("mask has no foreground".into()));
    }
    Ok((image_tensor(&image), mask_tensor(&mask), (image.height, image.width)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Round-robin class-to-fold assignment by ascending class id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldSpec {
    pub fold_count: usize,
    pub fold_index: usize,
    classes: Vec<u32>,
}

impl FoldSpec {
    pub fn new(mut classes: Vec<u32>, fold_count: usize, fold_index: usize) -> Result<Self> {
        classes.sort_unstable();
        classes.dedup();
        if fold_count < 2 {
            return Err(Error::Config(format!("folds must be at least 2, got {fold_count}")));
        }
        if fold_index >= fold_count {
            return Err(Error::Config(format!(
                "fold {fold_index} out of range for {fold_count} folds"
            )));
        }
        if classes.len() < fold_count {
            return Err(Error::Config(format!(
                "{} classes cannot fill {fold_count} folds",
                classes.len()
            )));
        }
        Ok(FoldSpec {
            fold_count,
            fold_index,
            classes,
        })
    }

    pub fn fold_of(&self, class_id: u32) -> Option<usize> {
        self.classes.iter().position(|&c| c == class_id).map(|i| i % self.fold_count)
    }

    pub fn classes(&self, split: Split) -> Vec<u32> {
        self.classes
            .iter()
            .enumerate()
            .filter(|&(i, _)| (i % self.fold_count == self.fold_index) == (split == Split::Test))
            .map(|(_, &c)| c)
            .collect()
    }
}

/// Dataset indices of K supports and one query, all of `class_id`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub class_id: u32,
    pub support: Vec<usize>,
    pub query: usize,
}

pub fn sample_episode(
    dataset: &Dataset,
    folds: &FoldSpec,
    split: Split,
    shots: usize,
    rng: &mut impl Rng,
) -> Result<Episode> {
    if shots == 0 {
        return Err(Error::Config("shots must be at least 1".into()));
    }
    let pool = folds.classes(split);
    if pool.is_empty() {
        return Err(Error::Dataset(format!("{split:?} split has no classes")));
    }
    let class_id = pool[rng.random_range(0..pool.len())];
    let members = dataset.samples_of(class_id);
    if members.len() < shots + 1 {
        return Err(Error::Dataset(format!(
            "class {class_id} has {} samples, {} needed for a {shots}-shot episode",
            members.len(),
            shots + 1
        )));
    }
    let picks = index::sample(rng, members.len(), shots + 1);
    let mut chosen: Vec<usize> = picks.iter().map(|i| members[i]).collect();
    let query = chosen.pop().expect("shots + 1 picks");
    Ok(Episode {
        class_id,
        support: chosen,
        query,
    })
}

/// Backbone features of every dataset sample, computed once.
pub struct FeatureBank {
    pyramids: Vec<FeaturePyramid<f32>>,
}

impl FeatureBank {
    pub fn build(backbone: &Backbone<f32>, dataset: &Dataset) -> Result<Self> {
        let pyramids = (0..dataset.len())
            .into_par_iter()
            .map(|i| backbone.extract_features(dataset.image(i)))
            .collect::<Result<_>>()?;
        Ok(FeatureBank { pyramids })
    }

    pub fn pyramid(&self, i: usize) -> &FeaturePyramid<f32> {
        &self.pyramids[i]
    }

    pub fn episode<'a>(&'a self, dataset: &'a Dataset, episode: &Episode) -> EpisodeFeatures<'a, f32> {
        EpisodeFeatures {
            query: &self.pyramids[episode.query],
            supports: episode
                .support
                .iter()
                .map(|&s| SupportFeatures {
                    pyramid: &self.pyramids[s],
                    mask: dataset.mask(s),
                })
                .collect(),
            out_size: dataset.image_size,
        }
    }
}
