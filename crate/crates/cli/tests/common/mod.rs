#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn emojich(run: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_emojich"))
        .arg("--run-dir")
        .arg(run)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

/// Runs a command and returns its JSON report, panicking with stderr on failure.
pub fn ok(run: &Path, args: &[&str]) -> serde_json::Value {
    let out = emojich(run, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("json report")
}

/// A tiny fully trained run (codec, base and fine-tuned models), built once
/// per test binary.
pub fn toy_run() -> &'static Path {
    static RUN: OnceLock<(tempfile::TempDir, PathBuf)> = OnceLock::new();
    &RUN.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let run = dir.path().join("run");
        let manifest = fixtures().join("emoji/manifest.jsonl");
        ok(
            &run,
            &[
                "prepare-data",
                "--manifest",
                manifest.to_str().unwrap(),
                "--base-count",
                "16",
            ],
        );
        ok(
            &run,
            &[
                "train-codec",
                "--codebook-size",
                "32",
                "--code-dim",
                "16",
                "--epochs",
                "2",
                "--restart-epochs",
                "1",
            ],
        );
        ok(
            &run,
            &[
                "pretrain-lm",
                "--d-model",
                "32",
                "--layers",
                "1",
                "--heads",
                "2",
                "--d-ff",
                "64",
                "--t-text",
                "16",
                "--epochs",
                "1",
            ],
        );
        ok(&run, &["finetune", "--epochs", "1", "--batch", "8"]);
        (dir, run)
    })
    .1
}

/// A private copy of the toy run, so tests can write without interfering.
pub fn fresh_copy(dst: &Path) -> PathBuf {
    copy_dir(toy_run(), dst);
    dst.to_path_buf()
}

pub fn copy_dir(src: &Path, dst: &Path) {
    fs::create_dir_all(dst).unwrap();
    for entry in fs::read_dir(src).unwrap() {
        let entry = entry.unwrap();
        let to = dst.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            copy_dir(&entry.path(), &to);
        } else {
            fs::copy(entry.path(), to).unwrap();
        }
    }
}
