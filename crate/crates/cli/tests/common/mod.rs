#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

/// Small network so CLI tests train in well under a second per epoch.
pub const TINY_OVERRIDES: [&str; 5] = ["widths=8,8", "out_dim=16", "k_feat=8", "topk_pairs=16", "class_hidden_width=16"];

pub fn obmreg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_obmreg"))
        .args(args)
        .env_remove("OBMREG_SEED")
        .output()
        .expect("binary runs")
}

pub fn ok(args: &[&str]) -> String {
    let out = obmreg(args);
    assert!(
        out.status.success(),
        "obmreg {args:?} failed ({:?}): {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

pub fn gen_small(dir: &Path, overlap: &str, seed: &str) -> PathBuf {
    let out = ok(&[
        "gen-data", "--out", s(dir), "--pairs", "4", "--val-pairs", "2", "--test-pairs", "3", "--points", "64",
        "--overlap", overlap, "--seed", seed,
    ]);
    PathBuf::from(out.trim())
}

pub fn train_args<'a>(manifest: &'a Path, out: &'a Path, epochs: &'a str) -> Vec<&'a str> {
    let mut args = vec!["train", "--manifest", s(manifest), "--out", s(out), "--epochs", epochs];
    for o in TINY_OVERRIDES {
        args.extend(["--set", o]);
    }
    args
}

/// Every file below `dir` with its bytes, sorted by relative path.
pub fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}
