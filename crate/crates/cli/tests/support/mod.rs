#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

pub const BIN: &str = env!("CARGO_BIN_EXE_bolt");

/// Run `bolt` inside `dir`.
pub fn bolt(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).args(args).current_dir(dir).output().expect("spawn bolt")
}

/// Run `bolt` and return stdout, panicking with stderr on a non-zero exit.
pub fn bolt_ok(dir: &Path, args: &[&str]) -> String {
    let out = bolt(dir, args);
    assert!(
        out.status.success(),
        "bolt {} failed ({:?}):\n{}",
        args.join(" "),
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf-8 stdout")
}

/// Every subcommand once, in pipeline order, with paths relative to the run directory.
pub fn pipeline_steps(seed: u64) -> Vec<Vec<String>> {
    let s = seed.to_string();
    let steps: Vec<Vec<&str>> = vec![
        vec!["gen", "--seed", &s, "--out", "fam"],
        vec!["pretrain", "--seed", &s, "--data", "fam", "--out", "fam/base.btc"],
        vec!["finetune-sources", "--seed", &s, "--base", "fam/base.btc", "--data", "fam", "--out", "fam"],
        vec!["build-basis", "--sources", "fam/src*.btc", "--base", "fam/base.btc", "--per-task-k", "1", "--out", "basis.btc"],
        vec![
            "init", "--seed", &s, "--basis", "basis.btc", "--sources", "fam/src*.btc", "--base", "fam/base.btc", "--data",
            "fam", "--out", "sigma0.btc",
        ],
        vec![
            "adapt", "--seed", &s, "--base", "fam/base.btc", "--basis", "basis.btc", "--sigma-init", "sigma0.btc", "--data",
            "fam", "--shots", "16", "--out", "sigma.btc",
        ],
        vec![
            "tta", "--seed", &s, "--base", "fam/base.btc", "--basis", "basis.btc", "--sigma-init", "sigma0.btc", "--data",
            "fam", "--out", "sigma_tta.btc",
        ],
        vec!["merge", "--base", "fam/base.btc", "--sources", "fam/src*.btc", "--alphas", "0.5", "--data", "fam", "--out", "merged.btc"],
        vec!["ablate", "--seed", &s, "--ranks", "1,8", "--n-tasks", "2,8", "--seeds", "1", "--epochs", "5", "--out", "ablation.csv"],
        vec!["inspect", "basis.btc", "--out", "manifest.json"],
    ];
    steps
        .into_iter()
        .map(|v| v.into_iter().map(String::from).collect())
        .collect()
}

pub fn run_pipeline(dir: &Path, seed: u64) {
    for step in pipeline_steps(seed) {
        let args: Vec<&str> = step.iter().map(String::as_str).collect();
        bolt_ok(dir, &args);
    }
}

/// Relative path → bytes for every file under `dir`, the results log excluded.
pub fn artifacts(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else if path.file_name().unwrap() != "results.jsonl" {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

pub fn log_records(dir: &Path) -> Vec<Value> {
    fs::read_to_string(dir.join("results.jsonl"))
        .unwrap_or_default()
        .lines()
        .map(|l| serde_json::from_str(l).expect("log line is JSON"))
        .collect()
}

/// A record without its timestamp, the only field allowed to differ between reruns.
pub fn without_timestamp(mut record: Value) -> Value {
    record.as_object_mut().unwrap().remove("timestamp");
    record
}
