#![allow(dead_code)]
//! Process-spawn helpers shared by the integration suites.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

/// The binary under test with a scrubbed option environment, so ambient
/// `SGDA_*` variables cannot leak into layering-sensitive assertions.
pub fn sgda() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_sgda"));
    for (k, _) in std::env::vars() {
        if k.starts_with("SGDA_") {
            c.env_remove(&k);
        }
    }
    c
}

pub fn run_in(dir: &Path, args: &[&str]) -> Output {
    sgda()
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawning the sgda binary")
}

/// Runs a command that must succeed; returns its stdout.
pub fn ok_in(dir: &Path, args: &[&str]) -> String {
    let out = run_in(dir, args);
    assert!(
        out.status.success(),
        "`sgda {}` failed with {:?}\nstdout: {}\nstderr: {}",
        args.join(" "),
        out.status.code(),
        stdout_of(&out),
        stderr_of(&out)
    );
    stdout_of(&out)
}

pub fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

pub fn code_of(out: &Output) -> i32 {
    out.status.code().expect("process exited with a code")
}

fn walk(dir: &Path, root: &Path, out: &mut Vec<PathBuf>) {
    for entry in std::fs::read_dir(dir).expect("readable tree") {
        let path = entry.expect("dir entry").path();
        if path.is_dir() {
            walk(&path, root, out);
        } else {
            out.push(path.strip_prefix(root).expect("under root").to_path_buf());
        }
    }
}

/// All files below `root`, as sorted root-relative paths.
pub fn tree_files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out.sort();
    out
}

/// Byte-compares two output trees, ignoring `config.resolved.json` (whose
/// `paths` member legitimately differs between runs into different
/// directories).
pub fn assert_same_artifacts(a: &Path, b: &Path) {
    let skip =
        |p: &PathBuf| p.file_name().is_some_and(|n| n == "config.resolved.json");
    let fa: Vec<PathBuf> = tree_files(a).into_iter().filter(|p| !skip(p)).collect();
    let fb: Vec<PathBuf> = tree_files(b).into_iter().filter(|p| !skip(p)).collect();
    assert_eq!(fa, fb, "file sets differ between {a:?} and {b:?}");
    for rel in &fa {
        let ba = std::fs::read(a.join(rel)).unwrap();
        let bb = std::fs::read(b.join(rel)).unwrap();
        assert_eq!(ba, bb, "{} differs between runs", rel.display());
    }
}
