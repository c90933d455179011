use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Args;
use midstate::nn::{Forward, Mode};
use midstate::tensor::{Shape, Tape, Tensor};
use midstate::zoo::report::{published, reconcile, FLOP_CONVENTION};
use midstate::zoo::{load_weights, Model, ModelConfig, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{create_dir, parse_variant, write_json};
use crate::error::CliError;
use crate::run::{Invocation, Run};

pub const PARAM_TOLERANCE: f64 = 0.05;
pub const GFLOP_TOLERANCE: f64 = 0.10;

#[derive(Args, Serialize)]
pub struct ArchArgs {
    #[arg(long, default_value = "midstate-ed", value_parser = parse_variant)]
    pub variant: Variant,
    #[arg(long, default_value_t = 200)]
    pub classes: usize,
    #[arg(long, default_value_t = 0.25)]
    pub width: f64,
    #[arg(long, default_value_t = 0.33)]
    pub depth: f64,
}

impl ArchArgs {
    fn config(&self, input_size: usize) -> Result<ModelConfig, CliError> {
        let cfg = ModelConfig {
            num_classes: self.classes,
            width_mult: self.width,
            depth_mult: self.depth,
            input_size,
            ..ModelConfig::new(self.variant)
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// The published figures only describe the stock 200-class model.
    fn is_reference(&self) -> bool {
        let stock = ModelConfig::new(self.variant);
        self.classes == stock.num_classes
            && self.width == stock.width_mult
            && self.depth == stock.depth_mult
    }
}

#[derive(Serialize)]
struct Check {
    published: f64,
    rel_diff: f64,
    tolerance: f64,
    within: bool,
}

fn check(measured: f64, published: Option<f64>, tolerance: f64) -> Option<Check> {
    published.map(|p| {
        let rel_diff = (measured - p) / p;
        Check {
            published: p,
            rel_diff,
            tolerance,
            within: rel_diff.abs() <= tolerance,
        }
    })
}

fn print_check(what: &str, c: &Option<Check>) {
    match c {
        Some(c) => println!(
            "published {what:<10} {}  diff {:+.2}%  within ±{:.0}%: {}",
            c.published,
            c.rel_diff * 100.0,
            c.tolerance * 100.0,
            if c.within { "yes" } else { "NO" }
        ),
        None => println!("published {what:<10} n/a for this configuration"),
    }
}

#[derive(Args, Serialize)]
pub struct ParamsArgs {
    #[command(flatten)]
    pub arch: ArchArgs,
    /// Print the comparison table for every variant and DualConv placement
    #[arg(long)]
    pub report: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Invocation for ParamsArgs {
    const NAME: &'static str = "params";
    fn seed(&self) -> u64 {
        self.seed
    }
    fn out(&self) -> Option<&Path> {
        self.out.as_deref()
    }
}

#[derive(Serialize)]
struct ParamsOutput {
    variant: Variant,
    trainable: usize,
    total: usize,
    check: Option<Check>,
}

pub fn params(a: &ParamsArgs, run: &mut Run) -> Result<(), CliError> {
    let cfg = a.arch.config(640)?;
    if a.report {
        let table = reconcile(&cfg)?.to_markdown();
        print!("{table}");
        if let Some(out) = &a.out {
            create_dir(out)?;
            let path = out.join("reconciliation.md");
            fs::write(&path, table).map_err(|e| CliError::io(&path, e))?;
            run.output(&path);
        }
        return Ok(());
    }
    let model = Model::<f32>::build(&cfg, &mut ChaCha8Rng::seed_from_u64(a.seed))?;
    let count = model.count_params();
    let reference = a
        .arch
        .is_reference()
        .then(|| published(a.arch.variant).0)
        .flatten();
    let c = check(
        count.trainable as f64,
        reference.map(|p| p as f64),
        PARAM_TOLERANCE,
    );
    println!("variant    {} ({} classes)", a.arch.variant, a.arch.classes);
    println!("trainable  {}", count.trainable);
    println!(
        "total      {}  (with normalization running statistics)",
        count.total
    );
    print_check("params", &c);
    if let Some(out) = &a.out {
        create_dir(out)?;
        let path = out.join("params.json");
        let o = ParamsOutput {
            variant: a.arch.variant,
            trainable: count.trainable,
            total: count.total,
            check: c,
        };
        write_json(&path, &o)?;
        run.output(&path);
    }
    Ok(())
}

#[derive(Args, Serialize)]
pub struct FlopsArgs {
    #[command(flatten)]
    pub arch: ArchArgs,
    #[arg(long, default_value_t = 640)]
    pub image_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Invocation for FlopsArgs {
    const NAME: &'static str = "flops";
    fn seed(&self) -> u64 {
        self.seed
    }
    fn out(&self) -> Option<&Path> {
        self.out.as_deref()
    }
}

#[derive(Serialize)]
struct FlopsOutput {
    variant: Variant,
    image_size: usize,
    gflops: f64,
    convention: &'static str,
    check: Option<Check>,
}

pub fn flops(a: &FlopsArgs, run: &mut Run) -> Result<(), CliError> {
    let cfg = a.arch.config(a.image_size)?;
    let model = Model::<f32>::build(&cfg, &mut ChaCha8Rng::seed_from_u64(a.seed))?;
    let gflops = model
        .count_flops(Shape::new(1, 3, a.image_size, a.image_size))?
        .gflops();
    let reference = (a.arch.is_reference() && a.image_size == 640)
        .then(|| published(a.arch.variant).1)
        .flatten();
    let c = check(gflops, reference, GFLOP_TOLERANCE);
    println!("variant    {} at {} px", a.arch.variant, a.image_size);
    println!("GFLOPs     {gflops:.3}");
    println!("convention {FLOP_CONVENTION}");
    print_check("GFLOPs", &c);
    if let Some(out) = &a.out {
        create_dir(out)?;
        let path = out.join("flops.json");
        let o = FlopsOutput {
            variant: a.arch.variant,
            image_size: a.image_size,
            gflops,
            convention: FLOP_CONVENTION,
            check: c,
        };
        write_json(&path, &o)?;
        run.output(&path);
    }
    Ok(())
}

#[derive(Args, Serialize)]
pub struct BenchArgs {
    /// Time a trained model instead of a freshly initialized variant
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long, default_value = "midstate-ed", value_parser = parse_variant)]
    pub variant: Variant,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    #[arg(long, default_value_t = 0.125)]
    pub width: f64,
    #[arg(long, default_value_t = 0.33)]
    pub depth: f64,
    #[arg(long, default_value_t = 160)]
    pub image_size: usize,
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
    #[arg(long, default_value_t = 3)]
    pub warmup: usize,
    #[arg(long, default_value_t = 20)]
    pub iterations: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Invocation for BenchArgs {
    const NAME: &'static str = "bench";
    fn seed(&self) -> u64 {
        self.seed
    }
    fn out(&self) -> Option<&Path> {
        self.out.as_deref()
    }
}

#[derive(Serialize)]
struct BenchOutput {
    iterations: usize,
    batch: usize,
    image_size: usize,
    median_ms: f64,
    p95_ms: f64,
    min_ms: f64,
    threads: usize,
}

/// Nearest-rank percentile of sorted samples.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

fn forward_once(model: &Model<f32>, input: &Tensor<f32>) -> Result<(), CliError> {
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let mut f = Forward::new(&mut tape, &model.store, Mode::Eval).track_grads(false);
    model.forward(&mut f, x)?;
    Ok(())
}

pub fn bench(a: &BenchArgs, run: &mut Run) -> Result<(), CliError> {
    if a.iterations == 0 || a.batch == 0 {
        return Err(CliError::usage("--iterations and --batch must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let model = match &a.weights {
        Some(path) => {
            run.input(path);
            load_weights(path)?
        }
        None => {
            let cfg = ModelConfig {
                num_classes: a.classes,
                width_mult: a.width,
                depth_mult: a.depth,
                input_size: a.image_size,
                ..ModelConfig::new(a.variant)
            };
            cfg.validate()?;
            Model::build(&cfg, &mut rng)?
        }
    };
    let shape = Shape::new(a.batch, 3, a.image_size, a.image_size);
    let values: Vec<f64> = (0..shape.numel()).map(|_| rng.random::<f64>()).collect();
    let input = Tensor::<f32>::from_f64(shape, &values)?;
    for _ in 0..a.warmup {
        forward_once(&model, &input)?;
    }
    let mut ms = Vec::with_capacity(a.iterations);
    for _ in 0..a.iterations {
        let t = Instant::now();
        forward_once(&model, &input)?;
        ms.push(t.elapsed().as_secs_f64() * 1e3);
    }
    ms.sort_by(f64::total_cmp);
    let o = BenchOutput {
        iterations: a.iterations,
        batch: a.batch,
        image_size: a.image_size,
        median_ms: percentile(&ms, 0.5),
        p95_ms: percentile(&ms, 0.95),
        min_ms: ms[0],
        threads: rayon::current_num_threads(),
    };
    println!(
        "{} iterations, batch {} at {} px, {} threads: median {:.2} ms  p95 {:.2} ms  min {:.2} ms",
        o.iterations, o.batch, o.image_size, o.threads, o.median_ms, o.p95_ms, o.min_ms
    );
    if let Some(out) = &a.out {
        create_dir(out)?;
        let path = out.join("bench.json");
        write_json(&path, &o)?;
        run.output(&path);
    }
    Ok(())
}
