use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ZooError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Yolov8nLike,
    Yolov10nLike,
    Midstate,
    MidstateDualconv,
    MidstateEma,
    MidstateEd,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Yolov8nLike,
        Variant::Yolov10nLike,
        Variant::Midstate,
        Variant::MidstateDualconv,
        Variant::MidstateEma,
        Variant::MidstateEd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Yolov8nLike => "yolov8n_like",
            Variant::Yolov10nLike => "yolov10n_like",
            Variant::Midstate => "midstate",
            Variant::MidstateDualconv => "midstate_dualconv",
            Variant::MidstateEma => "midstate_ema",
            Variant::MidstateEd => "midstate_ed",
        }
    }

    pub fn uses_dualconv(self) -> bool {
        matches!(self, Variant::MidstateDualconv | Variant::MidstateEd)
    }

    pub fn uses_ema(self) -> bool {
        matches!(self, Variant::MidstateEma | Variant::MidstateEd)
    }

    /// SCDD downsampling and the lightweight class branch.
    pub fn uses_v10_parts(self) -> bool {
        self == Variant::Yolov10nLike
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = ZooError;
    fn from_str(s: &str) -> Result<Self, ZooError> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| ZooError::Config(format!("unknown variant {s:?}")))
    }
}

/// Which C2f blocks become C2f-Dual in the DualConv variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DualPlacement {
    /// Only the C2f feeding SPPF.
    LastBackbone,
    /// Every backbone C2f (all sit before SPPF).
    Backbone,
    /// The last backbone C2f and all four neck C2f blocks.
    LastBackboneAndNeck,
}

impl DualPlacement {
    pub const ALL: [DualPlacement; 3] = [
        DualPlacement::LastBackbone,
        DualPlacement::Backbone,
        DualPlacement::LastBackboneAndNeck,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DualPlacement::LastBackbone => "last_backbone",
            DualPlacement::Backbone => "backbone",
            DualPlacement::LastBackboneAndNeck => "last_backbone_and_neck",
        }
    }
}

impl FromStr for DualPlacement {
    type Err = ZooError;
    fn from_str(s: &str) -> Result<Self, ZooError> {
        DualPlacement::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| ZooError::Config(format!("unknown dual placement {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub num_classes: usize,
    pub width_mult: f64,
    pub depth_mult: f64,
    pub input_size: usize,
    pub reg_max: usize,
    pub dualconv_groups: usize,
    pub ema_groups: usize,
    pub dual_placement: DualPlacement,
}

impl ModelConfig {
    pub fn new(variant: Variant) -> Self {
        ModelConfig {
            variant,
            num_classes: 200,
            width_mult: 0.25,
            depth_mult: 0.33,
            input_size: 640,
            reg_max: 16,
            dualconv_groups: 2,
            ema_groups: 8,
            dual_placement: DualPlacement::Backbone,
        }
    }

    /// Small desk-scale model: width 0.125 at 160 px.
    pub fn desk(variant: Variant, num_classes: usize) -> Self {
        ModelConfig {
            num_classes,
            width_mult: 0.125,
            input_size: 160,
            ..Self::new(variant)
        }
    }

    /// Scaled channel count, rounded up to a multiple of 8.
    pub fn width(&self, c: usize) -> usize {
        make_divisible(c.min(1024) as f64 * self.width_mult, 8)
    }

    pub fn depth(&self, n: usize) -> usize {
        ((n as f64 * self.depth_mult).round() as usize).max(1)
    }

    /// Flat `key=value` text, one key per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "variant={}", self.variant);
        let _ = writeln!(s, "num_classes={}", self.num_classes);
        let _ = writeln!(s, "width_mult={}", self.width_mult);
        let _ = writeln!(s, "depth_mult={}", self.depth_mult);
        let _ = writeln!(s, "input_size={}", self.input_size);
        let _ = writeln!(s, "reg_max={}", self.reg_max);
        let _ = writeln!(s, "dualconv_groups={}", self.dualconv_groups);
        let _ = writeln!(s, "ema_groups={}", self.ema_groups);
        let _ = writeln!(s, "dual_placement={}", self.dual_placement.name());
        s
    }

    /// Parses `key=value` lines over the defaults of the named variant.
    /// `#` starts a comment; unknown keys are errors.
    pub fn from_text(text: &str) -> Result<Self, ZooError> {
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ZooError::Config(format!("line {}: expected key=value", i + 1)))?;
            pairs.push((k.trim(), v.trim(), i + 1));
        }
        let variant = match pairs.iter().find(|(k, _, _)| *k == "variant") {
            Some((_, v, _)) => v.parse()?,
            None => return Err(ZooError::Config("missing key variant".into())),
        };
        let mut cfg = ModelConfig::new(variant);
        for (k, v, line) in pairs {
            let bad = |e: &dyn fmt::Display| ZooError::Config(format!("line {line}: {k}: {e}"));
            match k {
                "variant" => {}
                "num_classes" => cfg.num_classes = v.parse().map_err(|e| bad(&e))?,
                "width_mult" => cfg.width_mult = v.parse().map_err(|e| bad(&e))?,
                "depth_mult" => cfg.depth_mult = v.parse().map_err(|e| bad(&e))?,
                "input_size" => cfg.input_size = v.parse().map_err(|e| bad(&e))?,
                "reg_max" => cfg.reg_max = v.parse().map_err(|e| bad(&e))?,
                "dualconv_groups" => cfg.dualconv_groups = v.parse().map_err(|e| bad(&e))?,
                "ema_groups" => cfg.ema_groups = v.parse().map_err(|e| bad(&e))?,
                "dual_placement" => cfg.dual_placement = v.parse()?,
                other => {
                    return Err(ZooError::Config(format!(
                        "line {line}: unknown key {other:?}"
                    )))
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ZooError> {
        let err = |m: String| Err(ZooError::Config(m));
        if self.num_classes == 0 || self.reg_max == 0 {
            return err("num_classes and reg_max must be positive".into());
        }
        if !(self.width_mult > 0.0 && self.width_mult.is_finite()) {
            return err(format!("width_mult {} must be positive", self.width_mult));
        }
        if !(self.depth_mult > 0.0 && self.depth_mult.is_finite()) {
            return err(format!("depth_mult {} must be positive", self.depth_mult));
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(32) {
            return err(format!(
                "input_size {} must be a positive multiple of 32",
                self.input_size
            ));
        }
        if self.dualconv_groups == 0 || self.ema_groups == 0 {
            return err("group counts must be positive".into());
        }
        for c in [64, 128, 256, 512, 1024] {
            let w = self.width(c);
            if self.variant.uses_dualconv() && !(w / 2).is_multiple_of(self.dualconv_groups) {
                return err(format!(
                    "C2f half-width {} not divisible by {} groups",
                    w / 2,
                    self.dualconv_groups
                ));
            }
            if self.variant.uses_ema() && c >= 256 && !w.is_multiple_of(self.ema_groups) {
                return err(format!(
                    "width {w} not divisible by {} EMA groups",
                    self.ema_groups
                ));
            }
        }
        Ok(())
    }
}

fn make_divisible(x: f64, d: usize) -> usize {
    ((x / d as f64).ceil() as usize * d).max(d)
}
