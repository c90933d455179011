#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_midstate")
}

pub fn run_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .current_dir(dir)
        .env_remove("MSY_THREADS")
        .output()
        .expect("spawn midstate")
}

pub fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .env_remove("MSY_THREADS")
        .output()
        .expect("spawn midstate")
}

/// Stdout of a successful run; panics with stderr otherwise.
pub fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

pub fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(
        &fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display())),
    )
    .unwrap()
}

fn walk(root: &Path, dir: &Path, skip: &[&str], out: &mut Vec<PathBuf>) {
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let rel = path.strip_prefix(root).unwrap().to_path_buf();
        if skip.iter().any(|s| rel == Path::new(s)) {
            continue;
        }
        if path.is_dir() {
            walk(root, &path, skip, out);
        } else {
            out.push(rel);
        }
    }
}

/// SHA-256 over every file's relative path and bytes, in path order.
pub fn tree_digest(root: &Path, skip: &[&str]) -> (usize, String) {
    let mut files = Vec::new();
    walk(root, root, skip, &mut files);
    files.sort();
    let mut h = Sha256::new();
    for rel in &files {
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0]);
        h.update(fs::read(root.join(rel)).unwrap());
        h.update([0]);
    }
    let digest: String = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
    (files.len(), digest)
}

/// Column `col` of each data row in a training log, for rows that have it.
pub fn log_column(log: &str, col: usize) -> Vec<(usize, f64)> {
    log.lines()
        .skip(1)
        .filter_map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            Some((f[0].parse().ok()?, f.get(col)?.parse().ok()?))
        })
        .collect()
}
