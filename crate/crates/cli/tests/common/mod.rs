#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const SMOKE: &str = include_str!("../../../../configs/smoke.conf");
pub const DEFAULT: &str = include_str!("../../../../configs/default.conf");

/// Replaces `key`'s value inside `[section]`.
pub fn set(text: &str, section: &str, key: &str, value: &str) -> String {
    let mut current = String::new();
    let mut hit = false;
    let out: Vec<String> = text
        .lines()
        .map(|line| {
            let t = line.trim();
            if t.starts_with('[') && t.ends_with(']') {
                current = t[1..t.len() - 1].to_owned();
            } else if current == section && t.split('=').next().map(str::trim) == Some(key) {
                hit = true;
                return format!("{key} = {value}");
            }
            line.to_owned()
        })
        .collect();
    assert!(hit, "no key {section}.{key}");
    out.join("\n") + "\n"
}

pub fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

pub fn dfuse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dfuse"))
        .args(args)
        .arg("--quiet")
        .output()
        .expect("run dfuse")
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Relative path to contents for every file under `root`, sorted.
pub fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(dir: &Path, root: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(&path, root, out);
            } else {
                out.push((path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out.sort();
    out
}
