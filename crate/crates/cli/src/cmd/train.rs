use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use midstate::data::{load_ids, load_split, Manifest, Sample, Split};
use midstate::train::{fit, TrainConfig, Trainer, CHECKPOINT_WEIGHTS, LOG_FILE};
use midstate::zoo::{Model, ModelConfig, Variant};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::data::{read_id_list, split_list_path};
use super::{create_dir, parse_split, parse_unit, parse_variant};
use crate::error::CliError;
use crate::run::{Invocation, Run};

#[derive(Args, Serialize)]
pub struct TrainArgs {
    #[arg(long, default_value = "dataset")]
    pub data: PathBuf,
    /// Directory of train/val/test id lists written by `split`
    #[arg(long)]
    pub splits: Option<PathBuf>,
    #[arg(long, default_value = "midstate-ed", value_parser = parse_variant)]
    pub variant: Variant,
    #[arg(long, default_value_t = 0.125)]
    pub width: f64,
    #[arg(long, default_value_t = 0.33)]
    pub depth: f64,
    /// key=value training config; the flags below override it
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Evaluate every N epochs (0 disables)
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Stop once evaluation mAP@0.5 reaches this value
    #[arg(long, value_parser = parse_unit)]
    pub target_map50: Option<f64>,
    /// Split used for evaluation during training
    #[arg(long, default_value = "val", value_parser = parse_split)]
    pub eval_split: Split,
    /// Use only the first N training images
    #[arg(long)]
    pub max_train_images: Option<usize>,
    /// Continue from the checkpoint in --out
    #[arg(long)]
    pub resume: bool,
    /// Seeds weight init and batch order
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "runs/train")]
    pub out: PathBuf,
}

impl Invocation for TrainArgs {
    const NAME: &'static str = "train";
    fn seed(&self) -> u64 {
        self.seed
    }
    fn out(&self) -> Option<&Path> {
        Some(&self.out)
    }
}

fn load(a: &TrainArgs, manifest: &Manifest, split: Split) -> Result<Vec<Sample>, CliError> {
    Ok(match &a.splits {
        Some(dir) => load_ids(
            &a.data,
            manifest,
            &read_id_list(&split_list_path(dir, split))?,
        )?,
        None => load_split(&a.data, manifest, split)?,
    })
}

fn overrides(a: &TrainArgs, cfg: &mut TrainConfig) {
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.momentum {
        cfg.momentum = v;
    }
    if let Some(v) = a.weight_decay {
        cfg.weight_decay = v;
    }
    if let Some(v) = a.eval_every {
        cfg.eval_every = v;
    }
    if a.target_map50.is_some() {
        cfg.target_map50 = a.target_map50;
    }
}

fn fresh(a: &TrainArgs, manifest: &Manifest) -> Result<(Model<f32>, Trainer), CliError> {
    let mut cfg = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            TrainConfig::from_text(&text)?
        }
        None => TrainConfig {
            image_size: manifest.scene.image_size,
            ..TrainConfig::desk()
        },
    };
    cfg.seed = a.seed;
    overrides(a, &mut cfg);
    let mc = ModelConfig {
        width_mult: a.width,
        depth_mult: a.depth,
        input_size: cfg.image_size,
        ..ModelConfig::desk(a.variant, manifest.num_classes)
    };
    mc.validate()?;
    let model = Model::build(&mc, &mut ChaCha8Rng::seed_from_u64(a.seed))?;
    let trainer = Trainer::new(cfg, &model)?;
    Ok((model, trainer))
}

pub fn train(a: &TrainArgs, run: &mut Run) -> Result<(), CliError> {
    run.input(&a.data);
    let manifest = Manifest::read(&a.data)?;
    let mut train_set = load(a, &manifest, Split::Train)?;
    if let Some(n) = a.max_train_images {
        train_set.truncate(n);
    }
    if train_set.is_empty() {
        return Err(CliError::data("no training images"));
    }
    let eval_set = if a.eval_split == Split::Train {
        train_set.clone()
    } else {
        load(a, &manifest, a.eval_split)?
    };

    let (mut model, mut trainer) = if a.resume {
        let (model, mut trainer) = Trainer::resume(&a.out)?;
        overrides(a, &mut trainer.cfg);
        trainer.cfg.validate()?;
        (model, trainer)
    } else {
        create_dir(&a.out)?;
        fresh(a, &manifest)?
    };
    let model_cfg = model
        .config
        .clone()
        .ok_or_else(|| CliError::data("checkpoint has no model config"))?;
    if model_cfg.num_classes != manifest.num_classes {
        return Err(CliError::data(format!(
            "model has {} classes, dataset has {}",
            model_cfg.num_classes, manifest.num_classes
        )));
    }
    run.resolve("train_config", &trainer.cfg);
    run.resolve("model_config", &model_cfg);
    run.resolve("train_images", train_set.len());
    println!(
        "{} ({} params) on {} images, epochs {}..{}",
        model_cfg.variant,
        model.count_params().trainable,
        train_set.len(),
        trainer.epochs_done + 1,
        trainer.cfg.epochs
    );

    let mut reached_at = None;
    let target = trainer.cfg.target_map50;
    let logs = fit(
        &mut model,
        &mut trainer,
        &train_set,
        &eval_set,
        Some(&a.out),
        |e| {
            if let Some(m) = &e.metrics {
                println!(
                    "epoch {:>4}  loss {:.4}  P {:.2}  R {:.2}  mAP50 {:.4}  mAP50-95 {:.4}",
                    e.epoch, e.loss.total, m.precision, m.recall, m.map50, m.map50_95
                );
                if reached_at.is_none() && target.is_some_and(|t| m.map50 >= t) {
                    reached_at = Some(e.epoch);
                }
            }
        },
    )?;
    for name in [
        CHECKPOINT_WEIGHTS,
        "last.opt",
        LOG_FILE,
        "train.cfg",
        "model.cfg",
    ] {
        run.output(&a.out.join(name));
    }
    run.resolve("epochs_run", logs.len());
    if let Some(e) = reached_at {
        run.resolve("target_reached_epoch", e);
        println!("target mAP50 reached at epoch {e}");
    }
    println!("weights: {}", a.out.join(CHECKPOINT_WEIGHTS).display());
    Ok(())
}
