use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use clap::Args;
use midstate::data::{default_catalog, load_split, read_labels, Manifest, Split, MANIFEST_FILE};
use midstate::image::Image;
use midstate::metrics::{
    evaluate, read_results_jsonl, write_results_jsonl, EvalReport, GroundTruth, ScoredBox,
};
use midstate::post::{
    annotate, build_receipt, Catalog, Detection, Receipt, DEFAULT_CONF, DEFAULT_NMS_IOU,
};
use midstate::tensor::Shape;
use midstate::train::{predict_results, EVAL_DECODE_CONF};
use midstate::zoo::{load_weights, Model};
use serde::Serialize;

use super::{
    create_dir, file_stem, guard_distinct, list_images, parse_split, parse_unit, write_json,
};
use crate::error::CliError;
use crate::run::{Invocation, Run};

#[derive(Args, Serialize)]
pub struct EvalArgs {
    /// Model weights; scores --split of --data
    #[arg(long, required_unless_present = "results", conflicts_with = "results")]
    pub weights: Option<PathBuf>,
    /// JSONL detections (image_id, class_id, score, x1, y1, x2, y2 in pixels)
    #[arg(long, requires = "labels")]
    pub results: Option<PathBuf>,
    /// Directory of label files matched to --results by file stem
    #[arg(long, requires = "results")]
    pub labels: Option<PathBuf>,
    #[arg(long, default_value = "dataset")]
    pub data: PathBuf,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    pub split: Split,
    /// Image side for results mode; read from the dataset manifest when absent
    #[arg(long)]
    pub image_size: Option<usize>,
    /// Class count for results mode; read from the dataset manifest when absent
    #[arg(long)]
    pub classes: Option<usize>,
    /// Operating confidence for precision and recall
    #[arg(long, default_value_t = DEFAULT_CONF, value_parser = parse_unit)]
    pub conf: f64,
    #[arg(long, default_value_t = DEFAULT_NMS_IOU, value_parser = parse_unit)]
    pub nms_iou: f64,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write report.json (and predictions.jsonl in model mode) here
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Invocation for EvalArgs {
    const NAME: &'static str = "eval";
    fn seed(&self) -> u64 {
        self.seed
    }
    fn out(&self) -> Option<&Path> {
        self.out.as_deref()
    }
}

/// `labels/<split>` sits two levels below the dataset root.
fn manifest_near(labels: &Path) -> Option<Manifest> {
    let root = labels.parent()?.parent()?;
    root.join(MANIFEST_FILE)
        .exists()
        .then(|| Manifest::read(root).ok())
        .flatten()
}

fn label_ground_truth(dir: &Path, size: usize) -> Result<Vec<GroundTruth>, CliError> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    let mut paths: Vec<PathBuf> = Vec::new();
    for entry in entries {
        let p = entry.map_err(|e| CliError::io(dir, e))?.path();
        if p.extension().is_some_and(|x| x == "txt") {
            paths.push(p);
        }
    }
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::data(format!(
            "no label files in {}",
            dir.display()
        )));
    }
    let mut gts = Vec::new();
    for p in paths {
        let id = file_stem(&p);
        for b in read_labels(&p).map_err(|e| CliError::data(format!("{}: {e}", p.display())))? {
            gts.push(GroundTruth {
                image_id: id.clone(),
                bbox: b.to_bbox(size, size),
                class_id: b.class_id,
            });
        }
    }
    Ok(gts)
}

fn results_mode(
    a: &EvalArgs,
    results_path: &Path,
    labels: &Path,
    run: &mut Run,
) -> Result<EvalReport, CliError> {
    run.input(results_path);
    run.input(labels);
    let nearby = manifest_near(labels);
    let size = a
        .image_size
        .or(nearby.as_ref().map(|m| m.scene.image_size))
        .ok_or_else(|| CliError::usage("no dataset manifest near --labels; pass --image-size"))?;
    let file = fs::File::open(results_path).map_err(|e| CliError::io(results_path, e))?;
    let results = read_results_jsonl(BufReader::new(file))?;
    let gts = label_ground_truth(labels, size)?;
    let classes = match a.classes.or(nearby.as_ref().map(|m| m.num_classes)) {
        Some(n) => n,
        None => gts
            .iter()
            .map(|g| g.class_id)
            .chain(results.iter().map(|r| r.class_id))
            .max()
            .map_or(0, |m| m + 1),
    };
    run.resolve("image_size", size);
    run.resolve("classes", classes);
    Ok(evaluate(&results, &gts, classes, a.conf)?)
}

fn model_mode(
    a: &EvalArgs,
    weights: &Path,
    run: &mut Run,
) -> Result<(EvalReport, Vec<ScoredBox>), CliError> {
    run.input(weights);
    run.input(&a.data);
    let model = load_weights(weights)?;
    let nc = model
        .num_classes()
        .ok_or_else(|| CliError::data("weights have no detection head"))?;
    let manifest = Manifest::read(&a.data)?;
    let samples = load_split(&a.data, &manifest, a.split)?;
    if samples.is_empty() {
        return Err(CliError::data(format!("split {} is empty", a.split.name())));
    }
    let results = predict_results(&model, &samples, EVAL_DECODE_CONF, a.nms_iou, a.batch_size)?;
    let gts = midstate::data::ground_truth(&samples);
    let mut report = evaluate(&results, &gts, nc, a.conf)?;
    let size = samples[0].image.width;
    report.params = Some(model.count_params().trainable);
    report.gflops = Some(model.count_flops(Shape::new(1, 3, size, size))?.gflops());
    Ok((report, results))
}

pub fn eval(a: &EvalArgs, run: &mut Run) -> Result<(), CliError> {
    let (report, results) = match (&a.weights, &a.results, &a.labels) {
        (Some(w), _, _) => {
            let (r, res) = model_mode(a, w, run)?;
            (r, Some(res))
        }
        (None, Some(r), Some(l)) => (results_mode(a, r, l, run)?, None),
        _ => {
            return Err(CliError::usage(
                "pass --weights, or --results with --labels",
            ))
        }
    };
    print!("{}", report.to_table());
    if let Some(out) = &a.out {
        create_dir(out)?;
        let path = out.join("report.json");
        write_json(&path, &report)?;
        run.output(&path);
        if let Some(results) = results {
            let path = out.join("predictions.jsonl");
            let file = fs::File::create(&path).map_err(|e| CliError::io(&path, e))?;
            write_results_jsonl(std::io::BufWriter::new(file), &results)?;
            run.output(&path);
        }
    }
    Ok(())
}

#[derive(Args, Serialize)]
pub struct PredictArgs {
    #[arg(long)]
    pub weights: PathBuf,
    /// A .ppm image or a directory of them
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = DEFAULT_CONF, value_parser = parse_unit)]
    pub conf: f64,
    #[arg(long, default_value_t = DEFAULT_NMS_IOU, value_parser = parse_unit)]
    pub nms_iou: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "runs/predict")]
    pub out: PathBuf,
}

impl Invocation for PredictArgs {
    const NAME: &'static str = "predict";
    fn seed(&self) -> u64 {
        self.seed
    }
    fn out(&self) -> Option<&Path> {
        Some(&self.out)
    }
}

/// Detections for every image under `input`, keyed by file stem.
fn detect_all(
    model: &Model<f32>,
    input: &Path,
    conf: f64,
    nms_iou: f64,
) -> Result<Vec<(String, Image, Vec<Detection>)>, CliError> {
    let paths = list_images(input)?;
    if paths.is_empty() {
        return Err(CliError::data(format!(
            "no .ppm images under {}",
            input.display()
        )));
    }
    let mut out = Vec::with_capacity(paths.len());
    for p in paths {
        let image = Image::read(&p)?;
        if image.width % 32 != 0 || image.height % 32 != 0 {
            return Err(CliError::data(format!(
                "{}: {}x{} is not a multiple of 32",
                p.display(),
                image.width,
                image.height
            )));
        }
        let dets = model
            .detect(&[&image], conf, nms_iou)?
            .pop()
            .unwrap_or_default();
        out.push((file_stem(&p), image, dets));
    }
    Ok(out)
}

pub fn predict(a: &PredictArgs, run: &mut Run) -> Result<(), CliError> {
    run.input(&a.weights);
    run.input(&a.input);
    guard_distinct(&a.input, &a.out)?;
    let model = load_weights(&a.weights)?;
    let detected = detect_all(&model, &a.input, a.conf, a.nms_iou)?;
    create_dir(&a.out)?;
    let mut results = Vec::new();
    for (id, image, dets) in &detected {
        let (annotated, labels) = annotate(image, dets);
        let path = a.out.join(format!("{id}.ppm"));
        annotated.write(&path, &labels)?;
        run.output(&path);
        results.extend(dets.iter().map(|d| ScoredBox::new(id, d)));
        println!("{id}: {} detections", dets.len());
    }
    let path = a.out.join("detections.jsonl");
    let file = fs::File::create(&path).map_err(|e| CliError::io(&path, e))?;
    write_results_jsonl(std::io::BufWriter::new(file), &results)?;
    run.output(&path);
    Ok(())
}

#[derive(Args, Serialize)]
pub struct CheckoutArgs {
    #[arg(long)]
    pub weights: PathBuf,
    /// A .ppm image or a directory of them
    #[arg(long)]
    pub input: PathBuf,
    /// CSV class_id,name,unit_price_minor,threshold; placeholder prices when absent
    #[arg(long)]
    pub catalog: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_CONF, value_parser = parse_unit)]
    pub conf: f64,
    #[arg(long, default_value_t = DEFAULT_NMS_IOU, value_parser = parse_unit)]
    pub nms_iou: f64,
    /// Also write annotated images
    #[arg(long)]
    pub annotate: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "runs/checkout")]
    pub out: PathBuf,
}

impl Invocation for CheckoutArgs {
    const NAME: &'static str = "checkout";
    fn seed(&self) -> u64 {
        self.seed
    }
    fn out(&self) -> Option<&Path> {
        Some(&self.out)
    }
}

pub fn format_minor(v: u64) -> String {
    format!("{}.{:02}", v / 100, v % 100)
}

fn print_receipt(r: &Receipt) {
    println!("{}", r.image_id);
    for l in &r.lines {
        println!(
            "  {:>3} x {:<24} {:>10} {:>10}",
            l.count,
            l.name,
            format_minor(l.unit_price),
            format_minor(l.line_total)
        );
    }
    println!("  total {:>44}", format_minor(r.total));
}

pub fn checkout(a: &CheckoutArgs, run: &mut Run) -> Result<(), CliError> {
    run.input(&a.weights);
    run.input(&a.input);
    guard_distinct(&a.input, &a.out)?;
    let model = load_weights(&a.weights)?;
    let catalog = match &a.catalog {
        Some(path) => {
            run.input(path);
            Catalog::from_csv(fs::File::open(path).map_err(|e| CliError::io(path, e))?)?
        }
        None => Catalog::new(default_catalog(model.num_classes().unwrap_or(0)))?,
    };
    let detected = detect_all(&model, &a.input, a.conf, a.nms_iou)?;
    let receipt_dir = a.out.join("receipts");
    create_dir(&receipt_dir)?;
    let mut lines = String::new();
    for (id, image, dets) in &detected {
        let receipt = build_receipt(dets, &catalog, id, a.conf);
        let path = receipt_dir.join(format!("{id}.json"));
        write_json(&path, &receipt)?;
        run.output(&path);
        lines.push_str(&serde_json::to_string(&receipt)?);
        lines.push('\n');
        if a.annotate {
            let (annotated, labels) = annotate(image, dets);
            let path = a.out.join(format!("{id}.ppm"));
            annotated.write(&path, &labels)?;
            run.output(&path);
        }
        print_receipt(&receipt);
    }
    let path = a.out.join("receipts.jsonl");
    fs::write(&path, lines).map_err(|e| CliError::io(&path, e))?;
    run.output(&path);
    Ok(())
}
