pub mod data;
pub mod infer;
pub mod model;
pub mod train;

use std::fs;
use std::path::{Path, PathBuf};

use midstate::data::Split;
use midstate::zoo::Variant;
use serde::Serialize;

use crate::error::CliError;

/// Accepts `midstate-ed` as well as `midstate_ed`.
pub fn parse_variant(s: &str) -> Result<Variant, String> {
    s.replace('-', "_").parse().map_err(|_| {
        let names: Vec<String> = Variant::ALL
            .iter()
            .map(|v| v.name().replace('_', "-"))
            .collect();
        format!("expected one of {}", names.join(", "))
    })
}

pub fn parse_split(s: &str) -> Result<Split, String> {
    s.parse()
        .map_err(|_| "expected train, val or test".to_string())
}

/// Probability-like flag values.
pub fn parse_unit(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is outside [0, 1]"))
    }
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// A single `.ppm` file, or every `.ppm` directly inside a directory,
/// sorted by name.
pub fn list_images(input: &Path) -> Result<Vec<PathBuf>, CliError> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let entries = fs::read_dir(input).map_err(|e| CliError::io(input, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| CliError::io(input, e))?.path();
        if path.extension().is_some_and(|x| x == "ppm") && path.is_file() {
            paths.push(path);
        }
    }
    paths.sort();
    Ok(paths)
}

pub fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Refuses an output directory that is the input directory, so
/// annotated copies never replace source images.
pub fn guard_distinct(input: &Path, out: &Path) -> Result<(), CliError> {
    let dir = if input.is_file() {
        input.parent().unwrap_or(input)
    } else {
        input
    };
    if let (Ok(a), Ok(b)) = (dir.canonicalize(), out.canonicalize()) {
        if a == b {
            return Err(CliError::usage(format!(
                "--out {} is the input directory",
                out.display()
            )));
        }
    }
    Ok(())
}
