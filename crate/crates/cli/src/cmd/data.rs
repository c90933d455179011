use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use midstate::data::{
    assign_splits, default_catalog, generate_dataset, split_counts, Manifest, SceneSpec, Split,
};
use midstate::post::Catalog;
use serde::Serialize;

use super::{create_dir, write_json};
use crate::error::CliError;
use crate::run::{Invocation, Run};

#[derive(Args, Serialize)]
pub struct GenDataArgs {
    /// Number of images
    #[arg(long, default_value_t = 100)]
    pub images: usize,
    /// Number of product classes
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    /// Square image side in pixels
    #[arg(long, default_value_t = 160)]
    pub image_size: usize,
    #[arg(long, default_value_t = 1)]
    pub min_items: usize,
    #[arg(long, default_value_t = 4)]
    pub max_items: usize,
    /// Largest allowed intersection over the smaller box
    #[arg(long, default_value_t = 0.2, value_parser = super::parse_unit)]
    pub max_overlap: f64,
    /// Replace an existing dataset in --out
    #[arg(long)]
    pub overwrite: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "dataset")]
    pub out: PathBuf,
}

impl Invocation for GenDataArgs {
    const NAME: &'static str = "gen-data";
    fn seed(&self) -> u64 {
        self.seed
    }
    fn out(&self) -> Option<&Path> {
        Some(&self.out)
    }
}

const DATASET_ENTRIES: [&str; 5] = [
    "images",
    "labels",
    "manifest.json",
    "catalog.csv",
    crate::run::RUN_MANIFEST,
];

fn prepare_out(out: &Path, overwrite: bool) -> Result<(), CliError> {
    let occupied = fs::read_dir(out)
        .map(|mut d| d.next().is_some())
        .unwrap_or(false);
    if occupied && !overwrite {
        return Err(CliError::usage(format!(
            "{} is not empty; pass --overwrite to replace it",
            out.display()
        )));
    }
    if occupied {
        for name in DATASET_ENTRIES {
            let p = out.join(name);
            let removed = if p.is_dir() {
                fs::remove_dir_all(&p)
            } else {
                fs::remove_file(&p)
            };
            match removed {
                Err(e) if e.kind() != std::io::ErrorKind::NotFound => {
                    return Err(CliError::io(&p, e))
                }
                _ => {}
            }
        }
    }
    create_dir(out)
}

pub fn gen_data(a: &GenDataArgs, run: &mut Run) -> Result<(), CliError> {
    if a.images < 3 || a.classes == 0 {
        return Err(CliError::usage(
            "need at least 3 images (one per split) and 1 class",
        ));
    }
    let scene = SceneSpec {
        k_min: a.min_items,
        k_max: a.max_items,
        max_overlap: a.max_overlap,
        ..SceneSpec::new(a.image_size)
    };
    scene
        .validate()
        .map_err(|e| CliError::usage(e.to_string()))?;
    prepare_out(&a.out, a.overwrite)?;
    run.resolve("scene", &scene);

    let manifest = generate_dataset(&a.out, a.images, a.classes, &scene, a.seed)?;
    let catalog = Catalog::new(default_catalog(a.classes))?;
    let catalog_path = a.out.join("catalog.csv");
    fs::write(&catalog_path, catalog.to_csv()?).map_err(|e| CliError::io(&catalog_path, e))?;
    for name in ["manifest.json", "images", "labels", "catalog.csv"] {
        run.output(&a.out.join(name));
    }
    println!(
        "{} images, {} classes -> {} (train {}, val {}, test {})",
        a.images,
        a.classes,
        a.out.display(),
        manifest.count(Split::Train),
        manifest.count(Split::Val),
        manifest.count(Split::Test)
    );
    if manifest.reduced_images > 0 {
        println!(
            "{} images received fewer items than drawn (overlap cap)",
            manifest.reduced_images
        );
    }
    Ok(())
}

fn parse_ratios(s: &str) -> Result<[u32; 3], String> {
    let parts: Vec<&str> = s.split(':').collect();
    let [a, b, c] = parts.as_slice() else {
        return Err("expected train:val:test, e.g. 8:1:1".into());
    };
    let p = |x: &str| x.trim().parse::<u32>().map_err(|e| format!("{x:?}: {e}"));
    Ok([p(a)?, p(b)?, p(c)?])
}

#[derive(Args, Serialize)]
pub struct SplitArgs {
    /// Dataset directory; its manifest supplies the ids
    #[arg(long, required_unless_present = "ids", conflicts_with = "ids")]
    pub data: Option<PathBuf>,
    /// Text file with one image id per line
    #[arg(long)]
    pub ids: Option<PathBuf>,
    #[arg(long, default_value = "8:1:1", value_parser = parse_ratios)]
    pub ratios: [u32; 3],
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "splits")]
    pub out: PathBuf,
}

impl Invocation for SplitArgs {
    const NAME: &'static str = "split";
    fn seed(&self) -> u64 {
        self.seed
    }
    fn out(&self) -> Option<&Path> {
        Some(&self.out)
    }
}

#[derive(Serialize)]
struct SplitSummary {
    seed: u64,
    ratios: [u32; 3],
    train: usize,
    val: usize,
    test: usize,
}

pub fn split_list_path(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("{}.txt", split.name()))
}

pub fn read_id_list(path: &Path) -> Result<Vec<String>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

pub fn split(a: &SplitArgs, run: &mut Run) -> Result<(), CliError> {
    let ids: Vec<String> = match (&a.data, &a.ids) {
        (Some(root), _) => {
            run.input(root);
            Manifest::read(root)?
                .images
                .into_iter()
                .map(|e| e.id)
                .collect()
        }
        (None, Some(path)) => {
            run.input(path);
            read_id_list(path)?
        }
        (None, None) => return Err(CliError::usage("pass --data or --ids")),
    };
    let mut seen = std::collections::HashSet::new();
    if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
        return Err(CliError::data(format!("duplicate id {dup}")));
    }
    split_counts(ids.len(), a.ratios)?;
    let splits = assign_splits(ids.len(), a.ratios, a.seed)?;
    create_dir(&a.out)?;
    let mut counts = [0usize; 3];
    for (k, s) in Split::ALL.into_iter().enumerate() {
        let mut text = String::new();
        for (id, _) in ids.iter().zip(&splits).filter(|(_, &t)| t == s) {
            text.push_str(id);
            text.push('\n');
            counts[k] += 1;
        }
        let path = split_list_path(&a.out, s);
        fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        run.output(&path);
    }
    let summary = SplitSummary {
        seed: a.seed,
        ratios: a.ratios,
        train: counts[0],
        val: counts[1],
        test: counts[2],
    };
    let path = a.out.join("split.json");
    write_json(&path, &summary)?;
    run.output(&path);
    println!(
        "train {} / val {} / test {} -> {}",
        counts[0],
        counts[1],
        counts[2],
        a.out.display()
    );
    Ok(())
}
