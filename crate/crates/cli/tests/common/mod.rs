#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn ovseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ovseg"))
        .args(args)
        .output()
        .expect("spawn ovseg")
}

pub fn ok(args: &[&str]) -> Output {
    let out = ovseg(args);
    assert!(
        out.status.success(),
        "ovseg {args:?} exited with {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// Writes the default synthetic dataset under `root/data`.
pub fn synth(root: &Path, images: usize) -> PathBuf {
    let data = root.join("data");
    let n = images.to_string();
    ok(&["synth", "--out", s(&data), "--set", &format!("synth.images={n}")]);
    data
}

pub fn infer(data: &Path, out: &Path, jobs: usize) {
    let j = jobs.to_string();
    ok(&[
        "infer",
        "--jobs",
        &j,
        "--out",
        s(out),
        "--set",
        &format!("paths.data={}", s(data)),
    ]);
}

pub fn evaluate(data: &Path, out: &Path, jobs: usize) -> serde_json::Value {
    let j = jobs.to_string();
    ok(&[
        "evaluate",
        "--jobs",
        &j,
        "--out",
        s(out),
        "--set",
        &format!("paths.data={}", s(data)),
    ]);
    serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap()
}

/// Relative path to bytes for every file below `dir`.
pub fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}
