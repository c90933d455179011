//! Detector building blocks with owned, path-keyed parameters.
//!
//! A block is described by a [`BlockSpec`]; [`BlockSpec::init`] creates
//! its parameters under a prefix and [`BlockSpec::forward`] runs it on a
//! tape through a [`Forward`] context. Closed-form parameter and FLOP
//! counts live beside the forward code so the two can be checked
//! against each other.

mod blocks;
mod params;

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{BnStats, Element, Shape, Tape, Tensor, TensorError, Var};

pub use crate::tensor::FlopCount;
pub use blocks::{ScaleOutput, BN_EPS, BN_MOMENTUM, HEAD_BIAS_IMAGE};
pub use params::{Param, ParamStore};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum BlockError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("invalid block spec: {0}")]
    InvalidSpec(String),
}

pub type Result<T, E = BlockError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    ConvBnSilu,
    Bottleneck,
    DualConv,
    DualBottleneck,
    C2f,
    C2fDual,
    Sppf,
    Ema,
    Scdd,
    DetectHead,
}

/// Shape and hyperparameters of one block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BlockSpec {
    ConvBnSilu {
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
    },
    /// Grouped 3x3 plus dense 1x1 over the same input, summed, then BN + SiLU.
    DualConv {
        c_in: usize,
        c_out: usize,
        groups: usize,
    },
    /// Two 3x3 stages; `dual_groups` swaps both for DualConv.
    Bottleneck {
        c_in: usize,
        c_out: usize,
        shortcut: bool,
        dual_groups: Option<usize>,
    },
    C2f {
        c_in: usize,
        c_out: usize,
        repeats: usize,
        shortcut: bool,
        dual_groups: Option<usize>,
    },
    Sppf {
        c_in: usize,
        c_out: usize,
        kernel: usize,
    },
    Ema {
        channels: usize,
        groups: usize,
    },
    Scdd {
        c_in: usize,
        c_out: usize,
    },
    DetectHead {
        channels: [usize; 3],
        num_classes: usize,
        reg_max: usize,
        lightweight_cls: bool,
    },
}

impl BlockSpec {
    pub fn kind(&self) -> BlockKind {
        match self {
            BlockSpec::ConvBnSilu { .. } => BlockKind::ConvBnSilu,
            BlockSpec::DualConv { .. } => BlockKind::DualConv,
            BlockSpec::Bottleneck {
                dual_groups: None, ..
            } => BlockKind::Bottleneck,
            BlockSpec::Bottleneck { .. } => BlockKind::DualBottleneck,
            BlockSpec::C2f {
                dual_groups: None, ..
            } => BlockKind::C2f,
            BlockSpec::C2f { .. } => BlockKind::C2fDual,
            BlockSpec::Sppf { .. } => BlockKind::Sppf,
            BlockSpec::Ema { .. } => BlockKind::Ema,
            BlockSpec::Scdd { .. } => BlockKind::Scdd,
            BlockSpec::DetectHead { .. } => BlockKind::DetectHead,
        }
    }

    /// Checks every divisibility constraint.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(BlockError::InvalidSpec(msg));
        let positive = |vals: &[usize]| vals.iter().all(|&v| v > 0);
        match *self {
            BlockSpec::ConvBnSilu {
                c_in,
                c_out,
                kernel,
                stride,
            } => {
                if !positive(&[c_in, c_out, kernel, stride]) {
                    return bad(format!("{self:?} has a zero field"));
                }
            }
            BlockSpec::DualConv {
                c_in,
                c_out,
                groups,
            } => {
                if !positive(&[c_in, c_out, groups]) || c_in % groups != 0 || c_out % groups != 0 {
                    return bad(format!(
                        "dual_conv {c_in}->{c_out} not divisible by {groups} groups"
                    ));
                }
            }
            BlockSpec::Bottleneck {
                c_in,
                c_out,
                dual_groups,
                ..
            } => {
                if !positive(&[c_in, c_out]) {
                    return bad(format!("{self:?} has a zero field"));
                }
                if let Some(g) = dual_groups {
                    BlockSpec::DualConv {
                        c_in,
                        c_out,
                        groups: g,
                    }
                    .validate()?;
                }
            }
            BlockSpec::C2f {
                c_in,
                c_out,
                repeats,
                dual_groups,
                ..
            } => {
                if !positive(&[c_in, c_out, repeats]) || c_out % 2 != 0 {
                    return bad(format!(
                        "c2f {c_in}->{c_out} x{repeats} needs even positive widths"
                    ));
                }
                if let Some(g) = dual_groups {
                    BlockSpec::DualConv {
                        c_in: c_out / 2,
                        c_out: c_out / 2,
                        groups: g,
                    }
                    .validate()?;
                }
            }
            BlockSpec::Sppf {
                c_in,
                c_out,
                kernel,
            } => {
                if !positive(&[c_in, c_out]) || c_in % 2 != 0 || kernel % 2 != 1 {
                    return bad(format!("sppf needs even c_in and odd kernel, got {self:?}"));
                }
            }
            BlockSpec::Ema { channels, groups } => {
                if !positive(&[channels, groups]) || channels % groups != 0 {
                    return bad(format!("ema {channels} channels not divisible by {groups}"));
                }
            }
            BlockSpec::Scdd { c_in, c_out } => {
                if !positive(&[c_in, c_out]) {
                    return bad(format!("{self:?} has a zero field"));
                }
            }
            BlockSpec::DetectHead {
                channels,
                num_classes,
                reg_max,
                ..
            } => {
                if !positive(&channels) || !positive(&[num_classes, reg_max]) {
                    return bad(format!("{self:?} has a zero field"));
                }
            }
        }
        Ok(())
    }

    /// Creates this block's parameters under `prefix`.
    pub fn init<T: Element, R: Rng + ?Sized>(
        &self,
        prefix: &str,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<()> {
        self.validate()?;
        blocks::init(self, prefix, store, rng);
        Ok(())
    }

    /// Runs a single-input block. Use [`BlockSpec::forward_head`] for the head.
    pub fn forward<T: Element>(&self, f: &mut Forward<'_, T>, prefix: &str, x: Var) -> Result<Var> {
        blocks::forward(self, f, prefix, x)
    }

    pub fn forward_head<T: Element>(
        &self,
        f: &mut Forward<'_, T>,
        prefix: &str,
        features: &[Var],
    ) -> Result<Vec<ScaleOutput>> {
        blocks::forward_head(self, f, prefix, features)
    }

    /// Closed-form trainable parameter count.
    pub fn trainable_params(&self) -> usize {
        blocks::param_count(self).0
    }

    /// Closed-form count of non-trainable buffers (BN running statistics).
    pub fn buffer_params(&self) -> usize {
        blocks::param_count(self).1
    }

    /// FLOPs and output shape for a single-input block at `input`.
    pub fn flops(&self, input: Shape) -> Result<(FlopCount, Shape)> {
        blocks::flops(self, &[input])
    }

    pub fn head_flops(&self, inputs: &[Shape]) -> Result<(FlopCount, Shape)> {
        blocks::flops(self, inputs)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Batch statistics in BN; statistics are reported for running updates.
    Train,
    /// Stored running statistics in BN.
    Eval,
}

/// Per-call forward state: binds store parameters onto a tape on first use.
pub struct Forward<'a, T: Element> {
    pub tape: &'a mut Tape<T>,
    store: &'a ParamStore<T>,
    bound: HashMap<String, Var>,
    mode: Mode,
    track_grads: bool,
    bn_stats: Vec<(String, BnStats)>,
}

impl<'a, T: Element> Forward<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, store: &'a ParamStore<T>, mode: Mode) -> Self {
        Forward {
            tape,
            store,
            bound: HashMap::new(),
            mode,
            track_grads: mode == Mode::Train,
            bn_stats: Vec::new(),
        }
    }

    /// Uses the given tape variables for the named parameters instead of
    /// registering copies from the store.
    pub fn with_bindings(
        tape: &'a mut Tape<T>,
        store: &'a ParamStore<T>,
        mode: Mode,
        bindings: HashMap<String, Var>,
    ) -> Self {
        let mut f = Self::new(tape, store, mode);
        f.bound = bindings;
        f
    }

    /// Records parameters as differentiable leaves even in eval mode.
    pub fn track_grads(mut self, on: bool) -> Self {
        self.track_grads = on;
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub(crate) fn param(&mut self, key: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(key) {
            return Ok(v);
        }
        let p = self
            .store
            .get(key)
            .ok_or_else(|| BlockError::MissingParam(key.to_string()))?;
        let v = self
            .tape
            .leaf(p.tensor.clone(), p.trainable && self.track_grads);
        self.bound.insert(key.to_string(), v);
        Ok(v)
    }

    pub(crate) fn buffer(&self, key: &str) -> Result<&'a Tensor<T>> {
        self.store
            .get(key)
            .map(|p| &p.tensor)
            .ok_or_else(|| BlockError::MissingParam(key.to_string()))
    }

    pub(crate) fn record_bn(&mut self, prefix: &str, stats: BnStats) {
        self.bn_stats.push((prefix.to_string(), stats));
    }

    /// Tape variables of every parameter touched so far.
    pub fn bindings(&self) -> &HashMap<String, Var> {
        &self.bound
    }

    /// Batch-norm statistics observed in train mode, keyed by BN prefix.
    pub fn take_bn_stats(&mut self) -> Vec<(String, BnStats)> {
        std::mem::take(&mut self.bn_stats)
    }
}

/// Blends observed batch statistics into `{prefix}.running_mean/var`.
pub fn update_running_stats<T: Element>(
    store: &mut ParamStore<T>,
    stats: &[(String, BnStats)],
    momentum: f64,
) -> Result<()> {
    for (prefix, s) in stats {
        for (suffix, values) in [("running_mean", &s.mean), ("running_var", &s.var)] {
            let key = format!("{prefix}.{suffix}");
            let p = store
                .get_mut(&key)
                .ok_or_else(|| BlockError::MissingParam(key.clone()))?;
            for (r, &v) in p.tensor.data_mut().iter_mut().zip(values) {
                *r = T::from_f64((1.0 - momentum) * r.as_f64() + momentum * v);
            }
        }
    }
    Ok(())
}
