#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const MICRO: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/micro.toml");

pub fn lungseg(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lungseg"))
        .args(args)
        .env("LUNGSEG_OUTPUT_ROOT", root)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

pub fn ok(root: &Path, args: &[&str]) {
    let out = lungseg(root, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

pub fn with_config<'a>(cmd: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec![cmd, "--config", MICRO];
    v.extend_from_slice(extra);
    v
}

/// Every file under `dir`, keyed by relative path.
pub fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(
                    p.strip_prefix(dir).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

pub const PIPELINE: [&str; 7] = [
    "phantom", "train", "segment", "generate", "evaluate", "ablate", "plot",
];

pub fn run_pipeline(root: &Path) {
    for cmd in PIPELINE {
        let extra: &[&str] = if cmd == "segment" {
            &["--dump-features"]
        } else {
            &[]
        };
        ok(root, &with_config(cmd, extra));
    }
}
