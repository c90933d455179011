//! Full detector variants assembled from blocks, with parameter and FLOP
//! accounting and a binary weights format.

mod config;
mod infer;
pub mod report;
mod weights;

use rand::Rng;
use serde::Serialize;

use crate::nn::{BlockError, BlockSpec, Forward, ParamStore, ScaleOutput};
use crate::tensor::{Element, FlopCount, Shape, TensorError, Var};

pub use config::{DualPlacement, ModelConfig, Variant};
pub use weights::{
    decode, encode, load_weights, read_weights, save_weights, WeightsFile, WEIGHTS_MAGIC,
    WEIGHTS_VERSION,
};

#[derive(Debug, thiserror::Error)]
pub enum ZooError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Block(#[from] BlockError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("not a weights file (bad magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("weights format version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("weights do not match the model: {0}")]
    KeyMismatch(String),
    #[error("weights file truncated: {0}")]
    Truncated(String),
    #[error("malformed weights file: {0}")]
    Malformed(String),
}

impl From<TensorError> for ZooError {
    fn from(e: TensorError) -> Self {
        ZooError::Block(e.into())
    }
}

pub type Result<T, E = ZooError> = std::result::Result<T, E>;

/// Where a layer reads its input from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Source {
    Input,
    Layer(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum LayerOp {
    Block(BlockSpec),
    Upsample,
    Concat,
    Head(BlockSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Layer {
    /// Parameter prefix, `block{i}`.
    pub name: String,
    pub from: Vec<Source>,
    pub op: LayerOp,
}

#[derive(Clone, Copy, Debug)]
pub enum LayerOutput {
    Map(Var),
    Head([ScaleOutput; 3]),
}

/// Ordered layer list plus its parameter store.
#[derive(Clone, Debug)]
pub struct Model<T: Element> {
    pub config: Option<ModelConfig>,
    pub layers: Vec<Layer>,
    pub store: ParamStore<T>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerParams {
    pub name: String,
    pub kind: String,
    pub trainable: usize,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub trainable: usize,
    /// Including batch-norm running statistics.
    pub total: usize,
    pub per_layer: Vec<LayerParams>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlopReport {
    pub input: Shape,
    pub total: FlopCount,
    pub per_layer: Vec<(String, FlopCount)>,
}

impl FlopReport {
    pub fn gflops(&self) -> f64 {
        self.total.gflops()
    }
}

struct GraphBuilder {
    layers: Vec<Layer>,
    channels: Vec<usize>,
}

impl GraphBuilder {
    fn push(&mut self, from: Vec<Source>, op: LayerOp, c_out: usize) -> usize {
        let i = self.layers.len();
        self.layers.push(Layer {
            name: format!("block{i}"),
            from,
            op,
        });
        self.channels.push(c_out);
        i
    }

    fn prev(&self) -> Source {
        match self.layers.len() {
            0 => Source::Input,
            n => Source::Layer(n - 1),
        }
    }

    fn last_c(&self) -> usize {
        self.channels.last().copied().unwrap_or(3)
    }

    fn block(&mut self, spec: BlockSpec, c_out: usize) -> usize {
        let from = vec![self.prev()];
        self.push(from, LayerOp::Block(spec), c_out)
    }

    fn conv(&mut self, c_out: usize) -> usize {
        let c_in = self.last_c();
        self.block(
            BlockSpec::ConvBnSilu {
                c_in,
                c_out,
                kernel: 3,
                stride: 2,
            },
            c_out,
        )
    }

    fn downsample(&mut self, c_out: usize, scdd: bool) -> usize {
        if scdd {
            let c_in = self.last_c();
            self.block(BlockSpec::Scdd { c_in, c_out }, c_out)
        } else {
            self.conv(c_out)
        }
    }

    fn c2f(
        &mut self,
        c_out: usize,
        repeats: usize,
        shortcut: bool,
        dual_groups: Option<usize>,
    ) -> usize {
        let c_in = self.last_c();
        self.block(
            BlockSpec::C2f {
                c_in,
                c_out,
                repeats,
                shortcut,
                dual_groups,
            },
            c_out,
        )
    }

    fn upsample(&mut self) -> usize {
        let c = self.last_c();
        let from = vec![self.prev()];
        self.push(from, LayerOp::Upsample, c)
    }

    fn concat(&mut self, other: usize) -> usize {
        let c = self.last_c() + self.channels[other];
        let from = vec![self.prev(), Source::Layer(other)];
        self.push(from, LayerOp::Concat, c)
    }

    fn maybe_ema(&mut self, idx: usize, groups: Option<usize>) -> usize {
        match groups {
            Some(g) => {
                let c = self.channels[idx];
                self.block(
                    BlockSpec::Ema {
                        channels: c,
                        groups: g,
                    },
                    c,
                )
            }
            None => idx,
        }
    }
}

/// Layer list for a configured variant: v8-style backbone, FPN/PAN neck,
/// three-scale head.
pub fn build_layers(cfg: &ModelConfig) -> Result<Vec<Layer>> {
    cfg.validate()?;
    let v = cfg.variant;
    let w = |c| cfg.width(c);
    let d = |n| cfg.depth(n);
    let g = v.uses_dualconv().then_some(cfg.dualconv_groups);
    let (bb_dual, last_dual, neck_dual) = match cfg.dual_placement {
        DualPlacement::LastBackbone => (None, g, None),
        DualPlacement::Backbone => (g, g, None),
        DualPlacement::LastBackboneAndNeck => (None, g, g),
    };
    let ema = v.uses_ema().then_some(cfg.ema_groups);
    let scdd = v.uses_v10_parts();

    let mut b = GraphBuilder {
        layers: Vec::new(),
        channels: Vec::new(),
    };
    b.conv(w(64));
    b.conv(w(128));
    b.c2f(w(128), d(3), true, bb_dual);
    b.conv(w(256));
    let p3 = b.c2f(w(256), d(6), true, bb_dual);
    b.downsample(w(512), scdd);
    let p4 = b.c2f(w(512), d(6), true, bb_dual);
    b.downsample(w(1024), scdd);
    b.c2f(w(1024), d(3), true, last_dual);
    let c = b.last_c();
    let p5 = b.block(
        BlockSpec::Sppf {
            c_in: c,
            c_out: w(1024),
            kernel: 5,
        },
        w(1024),
    );

    b.upsample();
    b.concat(p4);
    let n4 = b.c2f(w(512), d(3), false, neck_dual);
    let n4 = b.maybe_ema(n4, ema);
    b.upsample();
    b.concat(p3);
    let out3 = b.c2f(w(256), d(3), false, neck_dual);
    let out3 = b.maybe_ema(out3, ema);
    b.conv(w(256));
    b.concat(n4);
    let out4 = b.c2f(w(512), d(3), false, neck_dual);
    let out4 = b.maybe_ema(out4, ema);
    b.downsample(w(512), scdd);
    b.concat(p5);
    let out5 = b.c2f(w(1024), d(3), false, neck_dual);
    let out5 = b.maybe_ema(out5, ema);

    let channels = [b.channels[out3], b.channels[out4], b.channels[out5]];
    let head = BlockSpec::DetectHead {
        channels,
        num_classes: cfg.num_classes,
        reg_max: cfg.reg_max,
        lightweight_cls: scdd,
    };
    let from = vec![
        Source::Layer(out3),
        Source::Layer(out4),
        Source::Layer(out5),
    ];
    b.push(from, LayerOp::Head(head), cfg.num_classes);
    Ok(b.layers)
}

impl<T: Element> Model<T> {
    pub fn build<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let layers = build_layers(cfg)?;
        let mut m = Self::from_layers(layers, rng)?;
        m.config = Some(cfg.clone());
        Ok(m)
    }

    /// Initializes parameters for an arbitrary layer list.
    pub fn from_layers<R: Rng + ?Sized>(layers: Vec<Layer>, rng: &mut R) -> Result<Self> {
        let mut store = ParamStore::new();
        for (i, layer) in layers.iter().enumerate() {
            for src in &layer.from {
                if let Source::Layer(j) = src {
                    if *j >= i {
                        return Err(ZooError::Config(format!(
                            "{} reads from later layer {j}",
                            layer.name
                        )));
                    }
                }
            }
            match &layer.op {
                LayerOp::Block(spec) | LayerOp::Head(spec) => {
                    spec.init(&layer.name, &mut store, rng)?
                }
                LayerOp::Upsample | LayerOp::Concat => {}
            }
        }
        Ok(Model {
            config: None,
            layers,
            store,
        })
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.layers.iter().rev().find_map(|l| match l.op {
            LayerOp::Head(BlockSpec::DetectHead { num_classes, .. }) => Some(num_classes),
            _ => None,
        })
    }

    pub fn reg_max(&self) -> Option<usize> {
        self.layers.iter().rev().find_map(|l| match l.op {
            LayerOp::Head(BlockSpec::DetectHead { reg_max, .. }) => Some(reg_max),
            _ => None,
        })
    }

    /// Runs every layer; returns one output per layer.
    pub fn forward_layers(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Vec<LayerOutput>> {
        let mut outs: Vec<LayerOutput> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let mut inputs = Vec::with_capacity(layer.from.len());
            for src in &layer.from {
                inputs.push(match *src {
                    Source::Input => x,
                    Source::Layer(j) => match outs[j] {
                        LayerOutput::Map(v) => v,
                        LayerOutput::Head(_) => {
                            return Err(ZooError::Config(format!(
                                "{} reads a head output",
                                layer.name
                            )))
                        }
                    },
                });
            }
            let out = match &layer.op {
                LayerOp::Block(spec) => {
                    LayerOutput::Map(spec.forward(f, &layer.name, inputs[0])?)
                }
                LayerOp::Upsample => LayerOutput::Map(f.tape.upsample2x(inputs[0])?),
                LayerOp::Concat => LayerOutput::Map(f.tape.concat(&inputs)?),
                LayerOp::Head(spec) => {
                    let o = spec.forward_head(f, &layer.name, &inputs)?;
                    LayerOutput::Head([o[0], o[1], o[2]])
                }
            };
            outs.push(out);
        }
        Ok(outs)
    }

    /// Head outputs at strides 8, 16, 32.
    pub fn forward(&self, f: &mut Forward<'_, T>, x: Var) -> Result<[ScaleOutput; 3]> {
        match self.forward_layers(f, x)?.last() {
            Some(LayerOutput::Head(h)) => Ok(*h),
            _ => Err(ZooError::Config("model has no detection head".into())),
        }
    }

    pub fn count_params(&self) -> ParamCount {
        let mut per_layer = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let prefix = format!("{}.", layer.name);
            let (mut trainable, mut total) = (0, 0);
            for (k, p) in self.store.iter() {
                if k.starts_with(&prefix) {
                    total += p.tensor.numel();
                    if p.trainable {
                        trainable += p.tensor.numel();
                    }
                }
            }
            per_layer.push(LayerParams {
                name: layer.name.clone(),
                kind: layer_kind(&layer.op),
                trainable,
                total,
            });
        }
        ParamCount {
            trainable: self.store.trainable_count(),
            total: self.store.total_count(),
            per_layer,
        }
    }

    pub fn count_flops(&self, input: Shape) -> Result<FlopReport> {
        let mut shapes: Vec<Shape> = Vec::with_capacity(self.layers.len());
        let mut total = FlopCount::default();
        let mut per_layer = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let ins: Vec<Shape> = layer
                .from
                .iter()
                .map(|s| match *s {
                    Source::Input => input,
                    Source::Layer(j) => shapes[j],
                })
                .collect();
            let (f, out) = match &layer.op {
                LayerOp::Block(spec) => spec.flops(ins[0])?,
                LayerOp::Head(spec) => spec.head_flops(&ins)?,
                LayerOp::Upsample => {
                    let s = ins[0];
                    (FlopCount::default(), Shape::new(s.n, s.c, 2 * s.h, 2 * s.w))
                }
                LayerOp::Concat => {
                    let s = ins[0];
                    if ins.iter().any(|o| (o.n, o.h, o.w) != (s.n, s.h, s.w)) {
                        return Err(TensorError::dim("concat", format!("{ins:?}")).into());
                    }
                    (
                        FlopCount::default(),
                        Shape::new(s.n, ins.iter().map(|o| o.c).sum(), s.h, s.w),
                    )
                }
            };
            shapes.push(out);
            total += f;
            per_layer.push((layer.name.clone(), f));
        }
        Ok(FlopReport {
            input,
            total,
            per_layer,
        })
    }

    pub fn cast<U: Element>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            layers: self.layers.clone(),
            store: self.store.cast(),
        }
    }
}

fn layer_kind(op: &LayerOp) -> String {
    let kind = match op {
        LayerOp::Block(s) | LayerOp::Head(s) => s.kind(),
        LayerOp::Upsample => return "upsample".into(),
        LayerOp::Concat => return "concat".into(),
    };
    serde_json::to_value(kind)
        .ok()
        .and_then(|v| v.as_str().map(String::from))
        .unwrap_or_default()
}

/// Closed-form trainable parameter total from the layer specs alone.
pub fn analytic_params(layers: &[Layer]) -> usize {
    layers
        .iter()
        .map(|l| match &l.op {
            LayerOp::Block(s) | LayerOp::Head(s) => s.trainable_params(),
            _ => 0,
        })
        .sum()
}
