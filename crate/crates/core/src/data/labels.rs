use std::fs;
use std::path::Path;

use crate::post::BBox;

#[derive(Debug, thiserror::Error)]
pub enum LabelError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: {msg}")]
    Invalid { line: usize, msg: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// One object: class and a center-size box normalized to the image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabelBox {
    pub class_id: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

const SLACK: f64 = 1e-6;

impl LabelBox {
    pub fn from_bbox(class_id: usize, b: &BBox, width: usize, height: usize) -> Self {
        let (w, h) = (width as f64, height as f64);
        LabelBox {
            class_id,
            cx: (b.x1 + b.x2) / 2.0 / w,
            cy: (b.y1 + b.y2) / 2.0 / h,
            w: (b.x2 - b.x1) / w,
            h: (b.y2 - b.y1) / h,
        }
    }

    pub fn to_bbox(&self, width: usize, height: usize) -> BBox {
        let (w, h) = (width as f64, height as f64);
        BBox::from_center(self.cx * w, self.cy * h, self.w * w, self.h * h)
    }

    fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("cx", self.cx),
            ("cy", self.cy),
            ("w", self.w),
            ("h", self.h),
        ] {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(format!("{name} = {v} outside [0, 1]"));
            }
        }
        if self.cx - self.w / 2.0 < -SLACK
            || self.cy - self.h / 2.0 < -SLACK
            || self.cx + self.w / 2.0 > 1.0 + SLACK
            || self.cy + self.h / 2.0 > 1.0 + SLACK
        {
            return Err("box extends past the image".into());
        }
        Ok(())
    }
}

pub fn format_labels(boxes: &[LabelBox]) -> String {
    let mut s = String::new();
    for b in boxes {
        s.push_str(&format!(
            "{} {:.6} {:.6} {:.6} {:.6}\n",
            b.class_id, b.cx, b.cy, b.w, b.h
        ));
    }
    s
}

/// Parses `class cx cy w h` lines; blank lines are skipped.
pub fn parse_labels(text: &str) -> Result<Vec<LabelBox>, LabelError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let fields: Vec<&str> = raw.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 5 {
            return Err(LabelError::Parse {
                line,
                msg: format!("expected 5 fields, found {}", fields.len()),
            });
        }
        let class_id = fields[0].parse::<usize>().map_err(|e| LabelError::Parse {
            line,
            msg: format!("class id {:?}: {e}", fields[0]),
        })?;
        let mut v = [0.0; 4];
        for (slot, f) in v.iter_mut().zip(&fields[1..]) {
            *slot = f.parse::<f64>().map_err(|e| LabelError::Parse {
                line,
                msg: format!("{f:?}: {e}"),
            })?;
        }
        let b = LabelBox {
            class_id,
            cx: v[0],
            cy: v[1],
            w: v[2],
            h: v[3],
        };
        b.validate()
            .map_err(|msg| LabelError::Invalid { line, msg })?;
        out.push(b);
    }
    Ok(out)
}

pub fn read_labels(path: &Path) -> Result<Vec<LabelBox>, LabelError> {
    let text = fs::read_to_string(path).map_err(|source| LabelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_labels(&text)
}

pub fn write_labels(path: &Path, boxes: &[LabelBox]) -> Result<(), LabelError> {
    fs::write(path, format_labels(boxes)).map_err(|source| LabelError::Io {
        path: path.display().to_string(),
        source,
    })
}
