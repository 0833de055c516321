use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

fn bqf(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bqf"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn bqf")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = bqf(dir, args);
    assert!(
        out.status.success(),
        "bqf {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn tiny_config(extra: Value) -> Value {
    let mut cfg = json!({
        "corpus": "corpus.txt",
        "d_model": 16,
        "n_layers": 1,
        "n_heads": 2,
        "d_ff": 32,
        "max_seq_len": 16,
        "seq_len": 16,
        "batch_size": 2,
        "chunks": 2,
        "steps_per_chunk": 3,
        "eval_windows": 4,
        "log_every": 2,
        "init_search_steps": 3,
        "init_search_batches": 2,
        "lr_start": 1e-3,
        "lr_end": 1e-4
    });
    for (k, v) in extra.as_object().unwrap() {
        cfg[k] = v.clone();
    }
    cfg
}

/// A workspace holding a generated corpus and a tiny config.
fn workspace(extra: Value) -> (TempDir, PathBuf) {
    let dir = TempDir::new().unwrap();
    ok(
        dir.path(),
        &["gen-corpus", "--bytes", "20000", "--out", "."],
    );
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, tiny_config(extra).to_string()).unwrap();
    (dir, cfg)
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn full_flow_writes_every_artifact() {
    let (dir, _) = workspace(json!({}));
    let d = dir.path();
    ok(d, &["pretrain", "--config", "cfg.json", "--out", "pre"]);
    assert!(d.join("pre/pretrain.bqf").exists());
    let metrics = fs::read_to_string(d.join("pre/metrics.csv")).unwrap();
    assert!(metrics.starts_with("step,chunk,t,lr,train_loss,heldout_ppl\n"));

    let out = ok(
        d,
        &[
            "search-init",
            "--config",
            "cfg.json",
            "--checkpoint",
            "pre/pretrain.bqf",
            "--out",
            "init",
        ],
    );
    assert!(out.contains("search objective"));
    assert_eq!(
        fs::read_to_string(d.join("init/search_losses.csv"))
            .unwrap()
            .lines()
            .count(),
        4
    );

    ok(
        d,
        &[
            "train",
            "--config",
            "cfg.json",
            "--checkpoint",
            "init/init.bqf",
            "--out",
            "s2",
        ],
    );
    for layer in ["blocks.0.q", "blocks.0.down"] {
        for c in 0..2 {
            assert!(
                d.join(format!("s2/histograms/{layer}/chunk_{c:02}.csv"))
                    .exists(),
                "{layer} {c}"
            );
        }
    }
    let m = manifest(&d.join("s2"));
    assert_eq!(m["command"], "train");
    assert_eq!(
        m["details"]["near_unit_fraction_per_chunk"]
            .as_array()
            .unwrap()
            .len(),
        2
    );

    ok(
        d,
        &["export", "--checkpoint", "s2/stage2.bqf", "--out", "exp"],
    );
    let export: Value =
        serde_json::from_str(&fs::read_to_string(d.join("exp/export.json")).unwrap()).unwrap();
    assert_eq!(export["format"], "BPM1");
    assert_eq!(export["layers"].as_array().unwrap().len(), 6);
    assert!(d.join("exp/layers/blocks.0.up.bpm").exists());

    ok(
        d,
        &[
            "dump-metrics",
            "--checkpoint",
            "s2/stage2.bqf",
            "--out",
            "dm",
        ],
    );
    assert_eq!(
        fs::read(d.join("dm/metrics.csv")).unwrap(),
        fs::read(d.join("s2/metrics.csv")).unwrap()
    );
    ok(
        d,
        &[
            "dump-histograms",
            "--checkpoint",
            "s2/stage2.bqf",
            "--out",
            "dh",
        ],
    );
    assert!(d.join("dh/histograms/blocks.0.o.csv").exists());
}

#[test]
fn twenty_chunks_give_twenty_histograms_per_layer() {
    let (dir, _) = workspace(json!({ "chunks": 20, "steps_per_chunk": 1, "log_every": 0 }));
    let d = dir.path();
    ok(d, &["pretrain", "--config", "cfg.json", "--out", "pre"]);
    ok(
        d,
        &[
            "train",
            "--config",
            "cfg.json",
            "--checkpoint",
            "pre/pretrain.bqf",
            "--out",
            "s2",
        ],
    );
    let layers: Vec<_> = fs::read_dir(d.join("s2/histograms")).unwrap().collect();
    assert_eq!(layers.len(), 6);
    for layer in layers {
        let n = fs::read_dir(layer.unwrap().path()).unwrap().count();
        assert_eq!(n, 20);
    }
}

#[test]
fn reruns_are_byte_identical() {
    let (dir, _) = workspace(json!({}));
    let d = dir.path();
    for out in ["a", "b"] {
        ok(
            d,
            &[
                "pretrain",
                "--config",
                "cfg.json",
                "--out",
                &format!("{out}/pre"),
            ],
        );
        ok(
            d,
            &[
                "train",
                "--config",
                "cfg.json",
                "--checkpoint",
                &format!("{out}/pre/pretrain.bqf"),
                "--out",
                &format!("{out}/s2"),
            ],
        );
    }
    for f in [
        "pre/pretrain.bqf",
        "pre/metrics.csv",
        "s2/stage2.bqf",
        "s2/metrics.csv",
    ] {
        assert_eq!(
            fs::read(d.join("a").join(f)).unwrap(),
            fs::read(d.join("b").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn manifest_config_reparses_and_hashes_match() {
    let (dir, _) = workspace(json!({}));
    let d = dir.path();
    ok(d, &["pretrain", "--config", "cfg.json", "--out", "pre"]);
    let m = manifest(&d.join("pre"));
    let effective = m["effective_config"].to_string();
    let cfg = bqf_core::train::TrainConfig::from_json(&effective).unwrap();
    assert_eq!(cfg.d_model, 16);
    assert_eq!(cfg.steps_per_chunk, 3);
    assert_eq!(m["config_sha256"].as_str().unwrap().len(), 64);
    assert_eq!(m["corpus_git_sha256"].as_str().unwrap().len(), 64);
    assert!(m["finished_unix"].as_f64().unwrap() >= m["started_unix"].as_f64().unwrap());
}

#[test]
fn missing_corpus_key_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("cfg.json"), r#"{"d_model": 16}"#).unwrap();
    let out = bqf(dir.path(), &["pretrain", "--config", "cfg.json"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error:"), "{err}");
    assert!(err.contains("corpus"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
}

#[test]
fn unknown_config_key_is_rejected() {
    let (dir, _) = workspace(json!({ "learning_rate": 1 }));
    let out = bqf(dir.path(), &["pretrain", "--config", "cfg.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn checkpoint_version_mismatch_is_a_format_error() {
    let (dir, _) = workspace(json!({ "chunks": 1, "steps_per_chunk": 1 }));
    let d = dir.path();
    ok(d, &["pretrain", "--config", "cfg.json", "--out", "pre"]);
    let mut bytes = fs::read(d.join("pre/pretrain.bqf")).unwrap();
    bytes[4] = bytes[4].wrapping_add(1);
    fs::write(d.join("bad.bqf"), bytes).unwrap();
    let out = bqf(d, &["export", "--checkpoint", "bad.bqf"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("format error"), "{err}");
    assert!(err.contains("version"), "{err}");
}

#[test]
fn estimate_prints_reference_rows() {
    let dir = TempDir::new().unwrap();
    let out = ok(dir.path(), &["estimate", "--out", "."]);
    assert!(out.contains("13.4"), "{out}");
    let rows: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("estimate.json")).unwrap())
            .unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 5);
    let custom = ok(dir.path(), &["estimate", "--bits", "2,8", "--out", "c"]);
    assert!(
        custom.contains("w2a16") && custom.contains("w8a16"),
        "{custom}"
    );
}

#[test]
fn dump_schedule_matches_exponential_family() {
    let dir = TempDir::new().unwrap();
    ok(
        dir.path(),
        &["dump-schedule", "--chunks", "20", "--out", "."],
    );
    let csv = fs::read_to_string(dir.path().join("schedule.csv")).unwrap();
    let last = csv.lines().last().unwrap();
    let t: f64 = last.split(',').nth(1).unwrap().parse().unwrap();
    assert!((t - 83.675609178212896).abs() < 1e-9, "{last}");
}

#[test]
fn seed_flag_overrides_config() {
    let (dir, _) = workspace(json!({ "chunks": 1, "steps_per_chunk": 2 }));
    let d = dir.path();
    ok(d, &["pretrain", "--config", "cfg.json", "--out", "s0"]);
    ok(
        d,
        &[
            "pretrain", "--config", "cfg.json", "--seed", "7", "--out", "s7",
        ],
    );
    assert_eq!(manifest(&d.join("s7"))["effective_config"]["seed"], 7);
    assert_ne!(
        fs::read(d.join("s0/pretrain.bqf")).unwrap(),
        fs::read(d.join("s7/pretrain.bqf")).unwrap()
    );
}

#[test]
fn resumed_training_matches_uninterrupted_run() {
    let (dir, _) = workspace(json!({}));
    let d = dir.path();
    ok(d, &["pretrain", "--config", "cfg.json", "--out", "pre"]);
    ok(
        d,
        &[
            "train",
            "--config",
            "cfg.json",
            "--checkpoint",
            "pre/pretrain.bqf",
            "--out",
            "full",
        ],
    );

    let ck = bqf_core::checkpoint::Checkpoint::load(&d.join("full/stage2.bqf")).unwrap();
    let corpus = bqf_core::data::Corpus::load(&d.join("corpus.txt")).unwrap();
    let model = bqf_core::train::prepare_stage2(
        &bqf_core::checkpoint::Checkpoint::load(&d.join("pre/pretrain.bqf")).unwrap(),
        &ck.header.train.clone().unwrap(),
    )
    .unwrap();
    let mut tr =
        bqf_core::train::Trainer::new(model, ck.header.train.clone().unwrap(), &corpus, "stage2")
            .unwrap();
    tr.run_chunk().unwrap();
    tr.checkpoint().save(&d.join("half.bqf")).unwrap();

    ok(d, &["train", "--resume", "half.bqf", "--out", "resumed"]);
    assert_eq!(
        fs::read(d.join("resumed/stage2.bqf")).unwrap(),
        fs::read(d.join("full/stage2.bqf")).unwrap()
    );
    let out = bqf(
        d,
        &["train", "--resume", "half.bqf", "--seed", "9", "--out", "x"],
    );
    assert_eq!(out.status.code(), Some(1));
}
