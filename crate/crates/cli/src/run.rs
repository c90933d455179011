//! Run manifests: one `run.json` per invocation, beside the outputs.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{CliError, ErrorKind};

pub const RUN_MANIFEST: &str = "run.json";

#[derive(Debug, Serialize)]
pub struct ErrorDetail {
    pub kind: ErrorKind,
    pub exit_code: u8,
    pub message: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub subcommand: &'static str,
    pub tool_version: &'static str,
    pub seed: u64,
    pub argv: Vec<String>,
    /// Parsed flags, plus whatever the subcommand resolved from files
    /// and defaults.
    pub config: Map<String, Value>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub duration_s: f64,
    pub status: &'static str,
    pub error: Option<ErrorDetail>,
}

/// Implemented by every subcommand's argument struct.
pub trait Invocation: Serialize {
    const NAME: &'static str;
    fn seed(&self) -> u64;
    fn out(&self) -> Option<&Path>;
}

pub struct Run {
    manifest: RunManifest,
    out: Option<PathBuf>,
    start: Instant,
}

impl Run {
    pub fn start<A: Invocation>(args: &A) -> Self {
        let config = match serde_json::to_value(args) {
            Ok(Value::Object(m)) => m,
            _ => Map::new(),
        };
        Run {
            manifest: RunManifest {
                subcommand: A::NAME,
                tool_version: env!("CARGO_PKG_VERSION"),
                seed: args.seed(),
                argv: std::env::args().skip(1).collect(),
                config,
                inputs: Vec::new(),
                outputs: Vec::new(),
                duration_s: 0.0,
                status: "ok",
                error: None,
            },
            out: args.out().map(Path::to_path_buf),
            start: Instant::now(),
        }
    }

    pub fn input(&mut self, path: &Path) {
        self.manifest.inputs.push(path.display().to_string());
    }

    pub fn output(&mut self, path: &Path) {
        self.manifest.outputs.push(path.display().to_string());
    }

    pub fn resolve(&mut self, key: &str, value: impl Serialize) {
        if let Ok(v) = serde_json::to_value(value) {
            self.manifest.config.insert(key.to_string(), v);
        }
    }

    /// Writes the manifest when the subcommand has an output directory.
    /// The subcommand's own error takes precedence over a failed write.
    pub fn finish(mut self, result: Result<(), CliError>) -> Result<(), CliError> {
        self.manifest.duration_s = self.start.elapsed().as_secs_f64();
        if let Err(e) = &result {
            self.manifest.status = "error";
            self.manifest.error = Some(ErrorDetail {
                kind: e.kind,
                exit_code: e.kind.exit_code(),
                message: e.message.clone(),
            });
        }
        let written = match &self.out {
            Some(dir) => write_manifest(dir, &self.manifest),
            None => {
                log::debug!(
                    "{}",
                    serde_json::to_string(&self.manifest).unwrap_or_default()
                );
                Ok(())
            }
        };
        result.and(written)
    }
}

fn write_manifest(dir: &Path, m: &RunManifest) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let path = dir.join(RUN_MANIFEST);
    let mut text = serde_json::to_string_pretty(m)?;
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))
}

pub fn execute<A: Invocation>(
    args: A,
    body: fn(&A, &mut Run) -> Result<(), CliError>,
) -> Result<(), CliError> {
    let mut run = Run::start(&args);
    let result = body(&args, &mut run);
    run.finish(result)
}
