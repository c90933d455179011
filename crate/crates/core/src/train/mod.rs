//! Target assignment, detection loss, SGD and the training loop.

mod assign;
mod loss;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::metrics::{evaluate, EvalReport, MetricsError, ScoredBox};
use crate::nn::{update_running_stats, BlockError, Forward, Mode, ParamStore, BN_MOMENTUM};
use crate::post::{DEFAULT_CONF, DEFAULT_NMS_IOU};
use crate::tensor::{stack, Element, Tape, Tensor, TensorError};
use crate::zoo::{Model, ModelConfig, WeightsFile, ZooError};

pub use assign::{assign, cell_centers, grids_for, Grid, Target, TOP_K};
pub use loss::{assign_batch, detection_loss, Assignment, LossBreakdown, LossWeights};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite {term} loss{}", .batch.map(|b| format!(" at batch {b}")).unwrap_or_default())]
    NonFinite {
        term: &'static str,
        batch: Option<usize>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Block(#[from] BlockError),
    #[error(transparent)]
    Zoo(#[from] ZooError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

/// Score threshold used when decoding for mAP.
pub const EVAL_DECODE_CONF: f64 = 0.001;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub image_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub loss: LossWeights,
    /// Evaluate every this many epochs, and always after the last; 0 never.
    pub eval_every: usize,
    /// Operating confidence for P and R.
    pub eval_conf: f64,
    pub nms_iou: f64,
    /// Stop once evaluation reaches this mAP@0.5.
    pub target_map50: Option<f64>,
}

impl TrainConfig {
    /// 640 px, batch 32, 30 epochs.
    pub fn full() -> Self {
        TrainConfig {
            lr: 0.01,
            momentum: 0.937,
            weight_decay: 0.0005,
            batch_size: 32,
            image_size: 640,
            epochs: 30,
            seed: 0,
            loss: LossWeights::default(),
            eval_every: 1,
            eval_conf: DEFAULT_CONF,
            nms_iou: DEFAULT_NMS_IOU,
            target_map50: None,
        }
    }

    /// 160 px, batch 8.
    pub fn desk() -> Self {
        TrainConfig {
            batch_size: 8,
            image_size: 160,
            epochs: 100,
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay {}", self.weight_decay));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive".into());
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(32) {
            return bad(format!(
                "image_size {} is not a positive multiple of 32",
                self.image_size
            ));
        }
        for w in [self.loss.cls, self.loss.box_, self.loss.dfl] {
            if !(w >= 0.0 && w.is_finite()) {
                return bad(format!("loss weight {w}"));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "lr={}", self.lr);
        let _ = writeln!(s, "momentum={}", self.momentum);
        let _ = writeln!(s, "weight_decay={}", self.weight_decay);
        let _ = writeln!(s, "batch_size={}", self.batch_size);
        let _ = writeln!(s, "image_size={}", self.image_size);
        let _ = writeln!(s, "epochs={}", self.epochs);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "w_cls={}", self.loss.cls);
        let _ = writeln!(s, "w_box={}", self.loss.box_);
        let _ = writeln!(s, "w_dfl={}", self.loss.dfl);
        let _ = writeln!(s, "eval_every={}", self.eval_every);
        let _ = writeln!(s, "eval_conf={}", self.eval_conf);
        let _ = writeln!(s, "nms_iou={}", self.nms_iou);
        match self.target_map50 {
            Some(t) => {
                let _ = writeln!(s, "target_map50={t}");
            }
            None => s.push_str("target_map50=none\n"),
        }
        s
    }

    /// Flat `key=value` lines over the desk defaults; `#` starts a comment.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::desk();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| TrainError::Config(format!("line {}: expected key=value", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            let err =
                |e: &dyn std::fmt::Display| TrainError::Config(format!("line {}: {k}: {e}", i + 1));
            let f = |v: &str| v.parse::<f64>().map_err(|e| err(&e));
            let u = |v: &str| v.parse::<usize>().map_err(|e| err(&e));
            match k {
                "lr" => c.lr = f(v)?,
                "momentum" => c.momentum = f(v)?,
                "weight_decay" => c.weight_decay = f(v)?,
                "batch_size" => c.batch_size = u(v)?,
                "image_size" => c.image_size = u(v)?,
                "epochs" => c.epochs = u(v)?,
                "seed" => c.seed = v.parse().map_err(|e| err(&e))?,
                "w_cls" => c.loss.cls = f(v)?,
                "w_box" => c.loss.box_ = f(v)?,
                "w_dfl" => c.loss.dfl = f(v)?,
                "eval_every" => c.eval_every = u(v)?,
                "eval_conf" => c.eval_conf = f(v)?,
                "nms_iou" => c.nms_iou = f(v)?,
                "target_map50" => c.target_map50 = if v == "none" { None } else { Some(f(v)?) },
                _ => {
                    return Err(TrainError::Config(format!(
                        "line {}: unknown key {k}",
                        i + 1
                    )))
                }
            }
        }
        c.validate()?;
        Ok(c)
    }
}

/// SGD with momentum and coupled weight decay:
/// `v = momentum * v + g + wd * p`, `p = p - lr * v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd<T: Element> {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: IndexMap<String, Tensor<T>>,
}

impl<T: Element> Sgd<T> {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64, store: &ParamStore<T>) -> Self {
        let velocity = store
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(k, p)| (k.to_string(), Tensor::zeros(p.tensor.shape())))
            .collect();
        Sgd {
            lr,
            momentum,
            weight_decay,
            velocity,
        }
    }

    /// Updates every trainable parameter; a missing gradient counts as zero.
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &HashMap<String, Tensor<T>>,
    ) -> Result<()> {
        for (key, v) in self.velocity.iter_mut() {
            let p = store
                .get_mut(key)
                .ok_or_else(|| BlockError::MissingParam(key.clone()))?;
            let g = grads.get(key);
            if let Some(g) = g {
                if g.shape() != p.tensor.shape() {
                    return Err(TrainError::Shape(format!(
                        "gradient of {key}: {} vs {}",
                        g.shape(),
                        p.tensor.shape()
                    )));
                }
            }
            let pd = p.tensor.data_mut();
            for (i, (vi, pi)) in v.data_mut().iter_mut().zip(pd.iter_mut()).enumerate() {
                let gi = g.map_or(0.0, |g| g.data()[i].as_f64());
                let nv = self.momentum * vi.as_f64() + gi + self.weight_decay * pi.as_f64();
                *vi = T::from_f64(nv);
                *pi = T::from_f64(pi.as_f64() - self.lr * nv);
            }
        }
        Ok(())
    }
}

pub fn targets_of(sample: &Sample) -> Vec<Target> {
    sample
        .boxes
        .iter()
        .map(|b| Target {
            class_id: b.class_id,
            bbox: b.to_bbox(sample.image.width, sample.image.height),
        })
        .collect()
}

fn check_sizes(samples: &[Sample], size: usize) -> Result<()> {
    for s in samples {
        if s.image.width != size || s.image.height != size {
            return Err(TrainError::Shape(format!(
                "{} is {}x{}, expected {size}x{size}",
                s.id, s.image.width, s.image.height
            )));
        }
    }
    Ok(())
}

/// Loss and per-parameter gradients for one batch in train mode. Batch
/// statistics are returned for the running-average update.
pub fn loss_and_grads<T: Element>(
    model: &Model<T>,
    batch: &[&Sample],
    weights: &LossWeights,
) -> Result<(
    LossBreakdown,
    HashMap<String, Tensor<T>>,
    Vec<(String, crate::tensor::BnStats)>,
)> {
    let x = stack(
        &batch
            .iter()
            .map(|s| s.image.to_tensor::<T>())
            .collect::<Vec<_>>(),
    )?;
    let targets: Vec<Vec<Target>> = batch.iter().map(|s| targets_of(s)).collect();
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let (loss, parts, bindings, stats) = {
        let mut f = Forward::new(&mut tape, &model.store, Mode::Train);
        let outs = model.forward(&mut f, xv)?;
        let bindings = f.bindings().clone();
        let stats = f.take_bn_stats();
        let (loss, parts) = detection_loss(f.tape, &outs, &targets, weights)?;
        (loss, parts, bindings, stats)
    };
    let mut grads = tape.backward(loss)?;
    let mut out = HashMap::with_capacity(bindings.len());
    for (k, v) in bindings {
        if let Some(g) = grads.take(v) {
            out.insert(k, g);
        }
    }
    Ok((parts, out, stats))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub precision: f64,
    pub recall: f64,
    pub map50: f64,
    pub map50_95: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean over the epoch's batches.
    pub loss: LossBreakdown,
    pub metrics: Option<EpochMetrics>,
}

pub const LOG_HEADER: &str = "epoch,loss_total,loss_cls,loss_box,loss_dfl,P,R,mAP50,mAP5095";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        let l = &self.loss;
        let m = match &self.metrics {
            Some(m) => format!("{},{},{},{}", m.precision, m.recall, m.map50, m.map50_95),
            None => ",,,".into(),
        };
        format!(
            "{},{},{},{},{},{m}",
            self.epoch, l.total, l.cls, l.box_, l.dfl
        )
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub const CHECKPOINT_WEIGHTS: &str = "last.msw";
pub const CHECKPOINT_OPTIMIZER: &str = "last.opt";
pub const LOG_FILE: &str = "log.csv";

/// Optimizer state plus the number of finished epochs.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub sgd: Sgd<f32>,
    pub epochs_done: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, model: &Model<f32>) -> Result<Self> {
        cfg.validate()?;
        let sgd = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay, &model.store);
        Ok(Trainer {
            cfg,
            sgd,
            epochs_done: 0,
        })
    }

    /// Sample order of an epoch: a pure function of the seed and epoch.
    pub fn order(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut r = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        r.set_stream(epoch as u64 + 1);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut r);
        idx
    }

    /// One pass over `train` in the seeded order.
    pub fn run_epoch(&mut self, model: &mut Model<f32>, train: &[Sample]) -> Result<LossBreakdown> {
        if train.is_empty() {
            return Err(TrainError::Config("empty training set".into()));
        }
        check_sizes(train, self.cfg.image_size)?;
        let order = self.order(train.len(), self.epochs_done);
        let mut sum = LossBreakdown::default();
        let mut batches = 0;
        for (bi, chunk) in order.chunks(self.cfg.batch_size).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let (parts, grads, stats) = match loss_and_grads(model, &batch, &self.cfg.loss) {
                Err(TrainError::NonFinite { term, .. }) => {
                    log::error!(
                        "epoch {} batch {bi}: non-finite {term} loss",
                        self.epochs_done
                    );
                    return Err(TrainError::NonFinite {
                        term,
                        batch: Some(bi),
                    });
                }
                r => r?,
            };
            update_running_stats(&mut model.store, &stats, BN_MOMENTUM)?;
            self.sgd.step(&mut model.store, &grads)?;
            sum.cls += parts.cls;
            sum.box_ += parts.box_;
            sum.dfl += parts.dfl;
            sum.total += parts.total;
            batches += 1;
        }
        self.epochs_done += 1;
        let k = batches as f64;
        Ok(LossBreakdown {
            cls: sum.cls / k,
            box_: sum.box_ / k,
            dfl: sum.dfl / k,
            total: sum.total / k,
        })
    }

    /// Writes `last.msw` and `last.opt` into `dir`.
    pub fn save_checkpoint(&self, model: &Model<f32>, dir: &Path) -> Result<()> {
        crate::zoo::save_weights(model, &dir.join(CHECKPOINT_WEIGHTS))?;
        let state = WeightsFile {
            config_text: format!("epochs_done={}\n{}", self.epochs_done, self.cfg.to_text()),
            records: self
                .sgd
                .velocity
                .iter()
                .map(|(k, v)| (k.clone(), v.data().to_vec()))
                .collect(),
        };
        state.save(&dir.join(CHECKPOINT_OPTIMIZER))?;
        Ok(())
    }

    /// Restores model, velocity, epoch counter and config from `dir`.
    pub fn resume(dir: &Path) -> Result<(Model<f32>, Trainer)> {
        let model = crate::zoo::load_weights(&dir.join(CHECKPOINT_WEIGHTS))?;
        let state = crate::zoo::read_weights(&dir.join(CHECKPOINT_OPTIMIZER))?;
        let (first, rest) = state
            .config_text
            .split_once('\n')
            .unwrap_or((&state.config_text, ""));
        let epochs_done = first
            .strip_prefix("epochs_done=")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| TrainError::Config("optimizer state lacks epochs_done".into()))?;
        let cfg = TrainConfig::from_text(rest)?;
        let mut trainer = Trainer::new(cfg, &model)?;
        if trainer.sgd.velocity.len() != state.records.len() {
            return Err(
                ZooError::KeyMismatch("optimizer state does not match the model".into()).into(),
            );
        }
        for ((k, v), (fk, data)) in trainer.sgd.velocity.iter_mut().zip(&state.records) {
            if k != fk || v.numel() != data.len() {
                return Err(ZooError::KeyMismatch(format!("optimizer state {fk} vs {k}")).into());
            }
            v.data_mut().copy_from_slice(data);
        }
        trainer.epochs_done = epochs_done;
        Ok((model, trainer))
    }
}

/// Runs the model over `samples` in batches and scores the detections.
pub fn evaluate_model<T: Element>(
    model: &Model<T>,
    samples: &[Sample],
    conf: f64,
    nms_iou: f64,
    batch_size: usize,
) -> Result<EvalReport> {
    let nc = model
        .num_classes()
        .ok_or_else(|| TrainError::Config("model has no head".into()))?;
    let results = predict_results(model, samples, EVAL_DECODE_CONF, nms_iou, batch_size)?;
    let gts = crate::data::ground_truth(samples);
    let mut report = evaluate(&results, &gts, nc, conf)?;
    report.params = Some(model.count_params().trainable);
    Ok(report)
}

pub fn predict_results<T: Element>(
    model: &Model<T>,
    samples: &[Sample],
    conf: f64,
    nms_iou: f64,
    batch_size: usize,
) -> Result<Vec<ScoredBox>> {
    let mut results = Vec::new();
    for chunk in samples.chunks(batch_size.max(1)) {
        let images: Vec<_> = chunk.iter().map(|s| &s.image).collect();
        for (s, dets) in chunk.iter().zip(model.detect(&images, conf, nms_iou)?) {
            results.extend(dets.iter().map(|d| ScoredBox::new(&s.id, d)));
        }
    }
    Ok(results)
}

fn epoch_metrics(r: &EvalReport) -> EpochMetrics {
    EpochMetrics {
        precision: r.precision,
        recall: r.recall,
        map50: r.map50,
        map50_95: r.map50_95,
    }
}

/// Trains until `cfg.epochs` or the mAP target. With `out`, appends each
/// epoch to `log.csv` and checkpoints after every epoch.
pub fn fit(
    model: &mut Model<f32>,
    trainer: &mut Trainer,
    train: &[Sample],
    val: &[Sample],
    out: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let log = dir.join(LOG_FILE);
        if trainer.epochs_done == 0 || !log.exists() {
            fs::write(&log, format!("{LOG_HEADER}\n")).map_err(io_err(&log))?;
        }
        let cfg_path = dir.join("train.cfg");
        fs::write(&cfg_path, trainer.cfg.to_text()).map_err(io_err(&cfg_path))?;
        if let Some(mc) = &model.config {
            let p = dir.join("model.cfg");
            fs::write(&p, ModelConfig::to_text(mc)).map_err(io_err(&p))?;
        }
    }
    let mut logs = Vec::new();
    while trainer.epochs_done < trainer.cfg.epochs {
        let loss = trainer.run_epoch(model, train)?;
        let epoch = trainer.epochs_done;
        let last = epoch == trainer.cfg.epochs;
        let due =
            trainer.cfg.eval_every > 0 && (epoch.is_multiple_of(trainer.cfg.eval_every) || last);
        let metrics = if due && !val.is_empty() {
            let r = evaluate_model(
                model,
                val,
                trainer.cfg.eval_conf,
                trainer.cfg.nms_iou,
                trainer.cfg.batch_size,
            )?;
            Some(epoch_metrics(&r))
        } else {
            None
        };
        let entry = EpochLog {
            epoch,
            loss,
            metrics,
        };
        if let Some(dir) = out {
            let log = dir.join(LOG_FILE);
            let mut text = fs::read_to_string(&log).map_err(io_err(&log))?;
            text.push_str(&entry.csv_row());
            text.push('\n');
            fs::write(&log, text).map_err(io_err(&log))?;
            trainer.save_checkpoint(model, dir)?;
        }
        log::info!("{}", entry.csv_row());
        on_epoch(&entry);
        let reached = matches!((trainer.cfg.target_map50, &entry.metrics), (Some(t), Some(m)) if m.map50 >= t);
        logs.push(entry);
        if reached {
            break;
        }
    }
    Ok(logs)
}
