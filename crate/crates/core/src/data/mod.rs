//! Synthetic checkout scenes: products on a counter, label files, the
//! dataset manifest and the train/val/test split.

mod labels;
mod sprites;

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::image::{Image, ImageError};
use crate::metrics::GroundTruth;
use crate::post::{BBox, CatalogEntry};

pub use labels::{format_labels, parse_labels, read_labels, write_labels, LabelBox, LabelError};
pub use sprites::{background, compose, PlacedItem, ProductSprite, Raster, ShapeFamily};

pub const GENERATOR_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
/// Placement attempts per item before the image gets fewer items.
pub const MAX_PLACEMENT_ATTEMPTS: usize = 1000;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("{path}: {source}")]
    Label { path: String, source: LabelError },
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("{0}")]
    Invalid(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub image_size: usize,
    pub k_min: usize,
    pub k_max: usize,
    /// Cap on intersection over the smaller box, for every pair.
    pub max_overlap: f64,
    pub background_seed: u64,
}

impl SceneSpec {
    pub fn new(image_size: usize) -> Self {
        SceneSpec {
            image_size,
            k_min: 1,
            k_max: 4,
            max_overlap: 0.2,
            background_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.k_min < 1 || self.k_max < self.k_min {
            return Err(DataError::Invalid(format!(
                "item range [{}, {}]",
                self.k_min, self.k_max
            )));
        }
        if !(0.0..1.0).contains(&self.max_overlap) {
            return Err(DataError::Invalid(format!(
                "overlap fraction {} not in [0, 1)",
                self.max_overlap
            )));
        }
        if self.image_size < 16 {
            return Err(DataError::Invalid(format!(
                "image size {}",
                self.image_size
            )));
        }
        Ok(())
    }
}

fn overlap_fraction(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    iw * ih / a.area().min(b.area())
}

/// Draws item count, classes, turns, scale jitter and positions. The
/// flag is set when an item could not be placed and the count was cut.
pub fn plan_scene<R: Rng + ?Sized>(
    sprites: &[ProductSprite],
    spec: &SceneSpec,
    rng: &mut R,
) -> (Vec<PlacedItem>, bool) {
    let k = rng.random_range(spec.k_min..=spec.k_max);
    let mut items: Vec<PlacedItem> = Vec::with_capacity(k);
    for _ in 0..k {
        let sprite = &sprites[rng.random_range(0..sprites.len())];
        let turns = rng.random_range(0..4u8);
        let scale = rng.random_range(0.8..=1.2);
        let raster = sprite.raster(scale, turns);
        if raster.width > spec.image_size || raster.height > spec.image_size {
            return (items, true);
        }
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let x = rng.random_range(0..=spec.image_size - raster.width);
            let y = rng.random_range(0..=spec.image_size - raster.height);
            let cand = PlacedItem {
                class_id: sprite.class_id,
                x,
                y,
                raster: raster.clone(),
            };
            let b = cand.bbox();
            if items
                .iter()
                .all(|o| overlap_fraction(&b, &o.bbox()) <= spec.max_overlap)
            {
                items.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return (items, true);
        }
    }
    (items, false)
}

fn image_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(index as u64);
    r
}

/// Renders image `index` of a dataset; a pure function of its arguments.
pub fn render_image(
    sprites: &[ProductSprite],
    spec: &SceneSpec,
    seed: u64,
    index: usize,
) -> (Image, Vec<LabelBox>, bool) {
    let mut bg_rng = image_rng(seed ^ spec.background_seed.rotate_left(32) ^ 0xb6, index);
    let bg = background(spec.image_size, &mut bg_rng);
    let mut rng = image_rng(seed, index);
    let (items, reduced) = plan_scene(sprites, spec, &mut rng);
    let img = compose(&bg, &items);
    let n = spec.image_size;
    let labels = items
        .iter()
        .map(|it| LabelBox::from_bbox(it.class_id, &it.bbox(), n, n))
        .collect();
    (img, labels, reduced)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = DataError;
    fn from_str(s: &str) -> Result<Self, DataError> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| DataError::Invalid(format!("unknown split {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub generator_version: u32,
    pub seed: u64,
    pub split_seed: u64,
    pub split_ratios: [u32; 3],
    pub num_classes: usize,
    pub scene: SceneSpec,
    pub sprites: Vec<ProductSprite>,
    pub images: Vec<ManifestEntry>,
    /// Images that received fewer items than drawn.
    pub reduced_images: usize,
    pub note: String,
}

pub const SYNTHETIC_NOTE: &str =
    "synthetic desk-scale scenes; metrics on this data are not comparable to \
                                  results on real checkout photographs";

impl Manifest {
    pub fn read(root: &Path) -> Result<Self, DataError> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, root: &Path) -> Result<(), DataError> {
        let path = root.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(&path, text).map_err(io_err(&path))
    }

    pub fn ids(&self, split: Split) -> impl Iterator<Item = &str> {
        self.images
            .iter()
            .filter(move |e| e.split == split)
            .map(|e| e.id.as_str())
    }

    pub fn count(&self, split: Split) -> usize {
        self.ids(split).count()
    }
}

pub fn image_path(root: &Path, split: Split, id: &str) -> PathBuf {
    root.join("images")
        .join(split.name())
        .join(format!("{id}.ppm"))
}

pub fn label_path(root: &Path, split: Split, id: &str) -> PathBuf {
    root.join("labels")
        .join(split.name())
        .join(format!("{id}.txt"))
}

/// Val and test get the floor of their share but at least one image;
/// the remainder goes to train.
pub fn split_counts(n: usize, ratios: [u32; 3]) -> Result<[usize; 3], DataError> {
    if ratios.contains(&0) {
        return Err(DataError::Invalid(format!(
            "split ratios {ratios:?} must be positive"
        )));
    }
    if n < 3 {
        return Err(DataError::Invalid(format!(
            "{n} images cannot fill 3 splits"
        )));
    }
    let sum: u64 = ratios.iter().map(|&r| r as u64).sum();
    let val = ((n as u64 * ratios[1] as u64 / sum) as usize).max(1);
    let test = ((n as u64 * ratios[2] as u64 / sum) as usize).max(1);
    let counts = [n - val - test, val, test];
    if counts.contains(&0) {
        return Err(DataError::Invalid(format!(
            "{n} images leave an empty split at ratios {ratios:?}"
        )));
    }
    Ok(counts)
}

/// Seeded shuffle, then contiguous slices in train, val, test order.
/// Entry `i` is the split of input `i`.
pub fn assign_splits(n: usize, ratios: [u32; 3], seed: u64) -> Result<Vec<Split>, DataError> {
    let counts = split_counts(n, ratios)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = vec![Split::Train; n];
    for (pos, &i) in order.iter().enumerate() {
        if pos >= counts[0] + counts[1] {
            out[i] = Split::Test;
        } else if pos >= counts[0] {
            out[i] = Split::Val;
        }
    }
    Ok(out)
}

pub fn split_dataset(
    manifest: &Manifest,
    ratios: [u32; 3],
    seed: u64,
) -> Result<Manifest, DataError> {
    let splits = assign_splits(manifest.images.len(), ratios, seed)?;
    let mut out = manifest.clone();
    for (e, s) in out.images.iter_mut().zip(splits) {
        e.split = s;
    }
    out.split_seed = seed;
    out.split_ratios = ratios;
    Ok(out)
}

fn make_dirs(root: &Path) -> Result<(), DataError> {
    for kind in ["images", "labels"] {
        for s in Split::ALL {
            let d = root.join(kind).join(s.name());
            fs::create_dir_all(&d).map_err(io_err(&d))?;
        }
    }
    Ok(())
}

/// Renders `n_images` scenes under `root`, split 8:1:1 with `seed`.
pub fn generate_dataset(
    root: &Path,
    n_images: usize,
    n_classes: usize,
    scene: &SceneSpec,
    seed: u64,
) -> Result<Manifest, DataError> {
    if n_classes < 1 || n_images < 1 {
        return Err(DataError::Invalid(format!(
            "{n_images} images of {n_classes} classes"
        )));
    }
    scene.validate()?;
    let sprites: Vec<ProductSprite> = (0..n_classes)
        .map(|c| ProductSprite::for_class(c, scene.image_size))
        .collect();
    let unsplit = Manifest {
        generator_version: GENERATOR_VERSION,
        seed,
        split_seed: seed,
        split_ratios: [8, 1, 1],
        num_classes: n_classes,
        scene: scene.clone(),
        sprites: sprites.clone(),
        images: (0..n_images)
            .map(|i| ManifestEntry {
                id: format!("img_{i:06}"),
                split: Split::Train,
            })
            .collect(),
        reduced_images: 0,
        note: SYNTHETIC_NOTE.into(),
    };
    let mut manifest = if n_images >= 3 {
        split_dataset(&unsplit, [8, 1, 1], seed)?
    } else {
        unsplit
    };
    make_dirs(root)?;

    const CHUNK: usize = 256;
    let mut reduced = 0;
    for start in (0..n_images).step_by(CHUNK) {
        let end = (start + CHUNK).min(n_images);
        let rendered: Vec<_> = (start..end)
            .into_par_iter()
            .map(|i| render_image(&sprites, scene, seed, i))
            .collect();
        for (i, (img, labels, cut)) in (start..end).zip(rendered) {
            let e = &manifest.images[i];
            if cut {
                log::warn!(
                    "{}: overlap cap unsatisfiable, placed {} items",
                    e.id,
                    labels.len()
                );
                reduced += 1;
            }
            img.write(&image_path(root, e.split, &e.id), &[])?;
            let lp = label_path(root, e.split, &e.id);
            write_labels(&lp, &labels).map_err(|source| DataError::Label {
                path: lp.display().to_string(),
                source,
            })?;
        }
    }
    manifest.reduced_images = reduced;
    manifest.write(root)?;
    Ok(manifest)
}

/// Moves files whose split tag differs between `old` and `new`, then
/// writes `new` as the manifest.
pub fn apply_split(root: &Path, old: &Manifest, new: &Manifest) -> Result<(), DataError> {
    if old.images.len() != new.images.len() {
        return Err(DataError::Invalid("manifests list different images".into()));
    }
    make_dirs(root)?;
    for (a, b) in old.images.iter().zip(&new.images) {
        if a.id != b.id {
            return Err(DataError::Invalid(format!(
                "image order differs at {} / {}",
                a.id, b.id
            )));
        }
        if a.split != b.split {
            for (from, to) in [
                (
                    image_path(root, a.split, &a.id),
                    image_path(root, b.split, &b.id),
                ),
                (
                    label_path(root, a.split, &a.id),
                    label_path(root, b.split, &b.id),
                ),
            ] {
                fs::rename(&from, &to).map_err(io_err(&from))?;
            }
        }
    }
    new.write(root)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub boxes: Vec<LabelBox>,
}

fn load_sample(root: &Path, split: Split, id: &str) -> Result<Sample, DataError> {
    let image = Image::read(&image_path(root, split, id))?;
    let lp = label_path(root, split, id);
    let boxes = read_labels(&lp).map_err(|source| DataError::Label {
        path: lp.display().to_string(),
        source,
    })?;
    Ok(Sample {
        id: id.to_string(),
        image,
        boxes,
    })
}

pub fn load_split(
    root: &Path,
    manifest: &Manifest,
    split: Split,
) -> Result<Vec<Sample>, DataError> {
    manifest
        .ids(split)
        .map(|id| load_sample(root, split, id))
        .collect()
}

/// Loads images by id, in the given order, from wherever the manifest
/// files them.
pub fn load_ids<S: AsRef<str>>(
    root: &Path,
    manifest: &Manifest,
    ids: &[S],
) -> Result<Vec<Sample>, DataError> {
    let place: HashMap<&str, Split> = manifest
        .images
        .iter()
        .map(|e| (e.id.as_str(), e.split))
        .collect();
    ids.iter()
        .map(|id| {
            let id = id.as_ref();
            let split = place
                .get(id)
                .ok_or_else(|| DataError::Invalid(format!("{id} is not in the manifest")))?;
            load_sample(root, *split, id)
        })
        .collect()
}

/// Pixel-space ground truth for evaluation.
pub fn ground_truth(samples: &[Sample]) -> Vec<GroundTruth> {
    samples
        .iter()
        .flat_map(|s| {
            s.boxes.iter().map(|b| GroundTruth {
                image_id: s.id.clone(),
                bbox: b.to_bbox(s.image.width, s.image.height),
                class_id: b.class_id,
            })
        })
        .collect()
}

/// Placeholder prices for generated classes, in minor units.
pub fn default_catalog(n_classes: usize) -> Vec<CatalogEntry> {
    (0..n_classes)
        .map(|c| CatalogEntry {
            class_id: c,
            name: format!("product_{c:03}"),
            unit_price_minor: 99 + 50 * c as u64,
            threshold: None,
        })
        .collect()
}
