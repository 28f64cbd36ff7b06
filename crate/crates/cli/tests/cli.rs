mod support;

use bolt_core::experiment::{build_library, run_fewshot, FewShotConfig, PipelineConfig, ABLATION_CSV_HEADER};
use bolt_core::spectral::basis_set_from_container;
use bolt_core::tensor_store::{load_container, save_container};
use bolt_core::ToyModel;
use support::*;
use tempfile::tempdir;

#[test]
fn gen_is_deterministic() {
    let (a, b, c) = (tempdir().unwrap(), tempdir().unwrap(), tempdir().unwrap());
    bolt_ok(a.path(), &["gen", "--seed", "7", "--out", "fam/"]);
    bolt_ok(b.path(), &["gen", "--seed", "7", "--out", "fam/"]);
    bolt_ok(c.path(), &["gen", "--seed", "8", "--out", "fam/"]);
    let (fa, fb, fc) = (artifacts(a.path()), artifacts(b.path()), artifacts(c.path()));
    assert_eq!(fa.len(), 12);
    assert_eq!(fa, fb);
    assert_eq!(fa.keys().collect::<Vec<_>>(), fc.keys().collect::<Vec<_>>());
    assert!(fa.iter().all(|(k, v)| fc[k] != *v));
}

#[test]
fn build_basis_rank_is_sum_of_per_task_k() {
    let dir = tempdir().unwrap();
    let d = dir.path();
    bolt_ok(d, &["gen", "--seed", "7", "--out", "fam/"]);
    bolt_ok(d, &["pretrain", "--seed", "7", "--data", "fam", "--out", "fam/base.btc"]);
    bolt_ok(d, &["finetune-sources", "--seed", "7", "--base", "fam/base.btc", "--data", "fam", "--out", "fam/"]);

    // Unquoted, the shell hands over one path per source.
    let mut args = vec!["build-basis", "--per-task-k", "1", "--base", "fam/base.btc", "--out", "basis.btc", "--sources"];
    let srcs: Vec<String> = (0..8).map(|i| format!("fam/src{i:02}.btc")).collect();
    args.extend(srcs.iter().map(String::as_str));
    bolt_ok(d, &args);

    let c = load_container(d.join("basis.btc")).unwrap();
    let r: serde_json::Value = serde_json::from_str(&c.metadata["r"]).unwrap();
    assert_eq!(r, serde_json::json!({"W1": 8, "W2": 8}));
    let bases = basis_set_from_container(&c).unwrap();
    assert!(bases.values().all(|b| b.r == 8 && !b.is_rank_deficient()));

    let record = log_records(d).pop().unwrap();
    assert_eq!(record["command"], "build-basis");
    assert_eq!(record["metrics"]["r::W1"], 8.0);

    bolt_ok(d, &["build-basis", "--per-task-k", "2", "--rank-cap", "5", "--base", "fam/base.btc", "--out", "capped.btc", "--sources", "fam/src*.btc"]);
    let capped = basis_set_from_container(&load_container(d.join("capped.btc")).unwrap()).unwrap();
    assert!(capped.values().all(|b| b.r == 5));
}

#[test]
fn ablate_writes_the_full_grid_in_canonical_order() {
    let dir = tempdir().unwrap();
    bolt_ok(dir.path(), &["ablate", "--ranks", "1,2,4,8", "--n-tasks", "2,4,8", "--seeds", "3", "--epochs", "2", "--out", "grid.csv"]);
    let csv = std::fs::read_to_string(dir.path().join("grid.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], ABLATION_CSV_HEADER);
    assert_eq!(lines.len(), 1 + 4 * 3 * 3);
    let mut expected = Vec::new();
    for seed in 0..3 {
        for rank in [1, 2, 4, 8] {
            for n in [2, 4, 8] {
                expected.push(format!("{rank},{n},{seed}"));
            }
        }
    }
    let keys: Vec<String> = lines[1..].iter().map(|l| l.splitn(4, ',').take(3).collect::<Vec<_>>().join(",")).collect();
    assert_eq!(keys, expected);
    for l in &lines[1..] {
        let accs: Vec<f64> = l.split(',').skip(3).map(|x| x.parse().unwrap()).collect();
        assert!(accs.iter().all(|a| (0.0..=1.0).contains(a)), "{l}");
    }
    assert_eq!(log_records(dir.path())[0]["metrics"]["rows"], 36.0);
}

#[test]
fn cli_reproduces_the_library_pipeline() {
    let seed = 3;
    let dir = tempdir().unwrap();
    let d = dir.path();
    for step in &pipeline_steps(seed)[..6] {
        let args: Vec<&str> = step.iter().map(String::as_str).collect();
        bolt_ok(d, &args);
    }
    let cfg = PipelineConfig::default();
    let lib = build_library(seed, &cfg).unwrap();
    assert_eq!(std::fs::read(d.join("fam/base.btc")).unwrap(), lib.theta_0.to_bytes().unwrap());
    for (i, src) in lib.sources.iter().enumerate() {
        assert_eq!(std::fs::read(d.join(format!("fam/src{i:02}.btc"))).unwrap(), src.to_bytes().unwrap());
    }
    let outcome = run_fewshot(&lib, &FewShotConfig::default(), seed).unwrap();
    let records = log_records(d);
    let init = &records[4]["metrics"];
    let adapt = &records[5]["metrics"];
    assert_eq!(init["init_acc"].as_f64().unwrap(), outcome.init_acc);
    assert_eq!(init["alpha_hat"].as_f64().unwrap(), outcome.alpha_hat);
    assert_eq!(init["base_acc"].as_f64().unwrap(), outcome.base_acc);
    assert_eq!(adapt["test_acc"].as_f64().unwrap(), outcome.adapted_acc);
}

#[test]
fn every_run_appends_one_record() {
    let dir = tempdir().unwrap();
    let d = dir.path();
    bolt_ok(d, &["gen", "--seed", "1", "--out", "fam", "--n-sources", "2", "--log", "log/a.jsonl"]);
    bolt_ok(d, &["gen", "--seed", "1", "--out", "fam", "--n-sources", "2", "--log", "log/a.jsonl"]);
    let failed = bolt(d, &["inspect", "nope.btc", "--log", "log/a.jsonl"]);
    assert_eq!(failed.status.code(), Some(1));
    let text = std::fs::read_to_string(d.join("log/a.jsonl")).unwrap();
    let records: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 3);
    assert!(!d.join("results.jsonl").exists());
    let last = records.last().unwrap();
    assert_eq!(last["command"], "inspect");
    assert_eq!(last["metrics"]["exit_code"], 1.0);
    for r in &records {
        for key in ["command", "config", "metrics", "seed", "timestamp"] {
            assert!(r.get(key).is_some(), "{key} missing from {r}");
        }
        let ts = r["timestamp"].as_str().unwrap();
        assert!(chrono::DateTime::parse_from_rfc3339(ts).is_ok(), "{ts}");
    }
    assert_eq!(without_timestamp(records[0].clone()), without_timestamp(records[1].clone()));
    assert_eq!(records[0]["config"]["n_sources"], 2);
    assert_eq!(records[0]["seed"], 1);
}

#[test]
fn exit_codes() {
    let dir = tempdir().unwrap();
    let d = dir.path();

    let unknown = bolt(d, &["adapt", "--bogus"]);
    assert_eq!(unknown.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&unknown.stderr);
    assert!(stderr.contains("Usage:"), "{stderr}");
    assert!(unknown.stdout.is_empty());

    assert_eq!(bolt(d, &["frobnicate"]).status.code(), Some(1));
    assert_eq!(bolt(d, &["adapt", "--shots", "3", "--base", "a", "--basis", "b", "--data", "c"]).status.code(), Some(1));
    assert_eq!(bolt(d, &["--help"]).status.code(), Some(0));

    bolt_ok(d, &["gen", "--seed", "2", "--out", "fam", "--n-sources", "2"]);
    bolt_ok(d, &["pretrain", "--seed", "2", "--data", "fam", "--out", "base.btc", "--epochs", "3"]);
    bolt_ok(d, &["finetune-sources", "--seed", "2", "--base", "base.btc", "--data", "fam", "--out", "fam", "--epochs", "2"]);
    bolt_ok(d, &["build-basis", "--sources", "fam/src*.btc", "--base", "base.btc", "--out", "basis.btc"]);

    let missing_out = bolt(d, &["build-basis", "--sources", "fam/src*.btc", "--base", "base.btc"]);
    assert_eq!(missing_out.status.code(), Some(1));
    let no_match = bolt(d, &["build-basis", "--sources", "fam/none*.btc", "--base", "base.btc", "--out", "x.btc"]);
    assert_eq!(no_match.status.code(), Some(1));
    let bad_alpha = bolt(d, &["merge", "--base", "base.btc", "--sources", "fam/src*.btc", "--alphas", "1,2,3", "--out", "m.btc"]);
    assert_eq!(bad_alpha.status.code(), Some(1));

    // A NaN learning rate poisons the coefficients and surfaces as a numeric failure.
    let nan = bolt(d, &["adapt", "--base", "base.btc", "--basis", "basis.btc", "--data", "fam", "--lr", "nan", "--out", "s.btc"]);
    assert_eq!(nan.status.code(), Some(2), "{}", String::from_utf8_lossy(&nan.stderr));
    assert_eq!(log_records(d).last().unwrap()["metrics"]["exit_code"], 2.0);
}

#[test]
fn rank_deficient_basis_warns() {
    let dir = tempdir().unwrap();
    let d = dir.path();
    let mut g = bolt_core::rng::rng_from(5, "cli-test");
    let base = ToyModel::init(6, 5, 3, &mut g);
    save_container(&base.to_container("theta_0"), d.join("base.btc")).unwrap();
    let mut tuned = base.clone();
    tuned.w1[(0, 0)] += 0.5;
    tuned.w2[(1, 2)] -= 0.25;
    // Two sources with the same update span one direction, not two.
    save_container(&tuned.to_container("src00"), d.join("src00.btc")).unwrap();
    save_container(&tuned.to_container("src01"), d.join("src01.btc")).unwrap();
    let out = bolt(d, &["build-basis", "--sources", "src*.btc", "--base", "base.btc", "--out", "basis.btc"]);
    assert!(out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("warning") && stderr.contains("rank-deficient"), "{stderr}");
    let record = log_records(d).pop().unwrap();
    assert_eq!(record["metrics"]["effective_rank::W1"], 1.0);
    assert_eq!(record["metrics"]["r::W1"], 2.0);
}

#[test]
fn inspect_prints_the_manifest() {
    let dir = tempdir().unwrap();
    let fixture = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/tests/fixtures/checkpoint_v1.btc");
    let stdout = bolt_ok(dir.path(), &["inspect", fixture]);
    let manifest: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(manifest["model_id"], "fixture");
    assert_eq!(manifest["role"], "checkpoint");
    assert_eq!(manifest["format_version"], 1);
    let names: Vec<&str> = manifest["entries"].as_array().unwrap().iter().map(|e| e["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["W1", "b1", "W2"]);
    assert_eq!(manifest["entries"][2]["offset"], 64);
    assert_eq!(log_records(dir.path())[0]["metrics"]["values"], 10.0);
}
