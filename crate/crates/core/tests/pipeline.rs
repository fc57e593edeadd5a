//! End-to-end runs of the `layersel` binary.

mod common;

use std::fs;
use std::path::Path;

use common::run_cli;
use layersel::cli::{CHECKPOINT, CONFIG_ECHO, EXIT_DATA, EXIT_OK, EXIT_USAGE, LSA_REPORT, REPORT};
use layersel::io::{load_manifest, read_checkpoint, read_feature_stack, write_feature_stack, FeatureStack, Split};
use layersel::train::{initial_checkpoint, TrainConfig};
use tempfile::TempDir;

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = run_cli(args, cwd);
    assert_eq!(
        out.status.code(),
        Some(EXIT_OK),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str], cwd: &Path) -> i32 {
    run_cli(args, cwd).status.code().expect("exited normally")
}

fn read(path: impl AsRef<Path>) -> Vec<u8> {
    fs::read(path).unwrap()
}

const SMALL_SYNTH: &[&str] = &["--editors", "4", "--per-editor", "24", "--layers", "6", "--dim", "16"];
const SMALL_TRAIN: &[&str] = &[
    "--epochs", "2", "--out-dim", "16", "--hidden", "16", "--rank", "4", "--batch", "8",
];

fn synth_small(dir: &Path, name: &str, extra: &[&str]) {
    let mut args = vec!["synth", "--out", name, "--seed", "3"];
    args.extend_from_slice(SMALL_SYNTH);
    args.extend_from_slice(extra);
    ok(&args, dir);
}

fn pipeline(dir: &Path, data: &str, tag: &str) {
    let (lsa, model, report) = (format!("{tag}-lsa"), format!("{tag}-model"), format!("{tag}-report"));
    ok(&["lsa", "--data", data, "--out", &lsa], dir);
    let lsa_file = format!("{lsa}/{LSA_REPORT}");
    let mut args = vec!["train", "--data", data, "--lsa", &lsa_file, "--out", &model, "--seed", "5"];
    args.extend_from_slice(SMALL_TRAIN);
    ok(&args, dir);
    let ckpt = format!("{model}/{CHECKPOINT}");
    ok(&["eval", "--data", data, "--checkpoint", &ckpt, "--out", &report], dir);
}

#[test]
fn default_synth_is_reproducible_and_full_size() {
    let tmp = TempDir::new().unwrap();
    ok(&["synth", "--out", "a", "--seed", "9"], tmp.path());
    ok(&["synth", "--out", "b", "--seed", "9"], tmp.path());
    for f in ["real.lfs", "edited.lfs", "manifest.jsonl", "truth.json"] {
        assert_eq!(read(tmp.path().join("a").join(f)), read(tmp.path().join("b").join(f)), "{f}");
    }
    let m = load_manifest(tmp.path().join("a/manifest.jsonl")).unwrap();
    assert_eq!(m.records.iter().filter(|r| r.y_auth == 1).count(), 1700);
    assert_eq!(m.editors.len(), 17);
    let edited = read_feature_stack(tmp.path().join("a/edited.lfs")).unwrap();
    assert_eq!((edited.n_samples(), edited.n_layers(), edited.dim()), (1700, 12, 64));
    assert!(m.records.iter().all(|r| r.split.is_some()));

    ok(&["synth", "--out", "c", "--seed", "10"], tmp.path());
    assert_ne!(read(tmp.path().join("a/edited.lfs")), read(tmp.path().join("c/edited.lfs")));
}

#[test]
fn single_layer_synth_warns() {
    let tmp = TempDir::new().unwrap();
    let out = run_cli(&["synth", "--out", "d", "--layers", "1", "--per-editor", "5"], tmp.path());
    assert_eq!(out.status.code(), Some(EXIT_OK));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("single layer"), "stderr: {stderr}");

    let out = run_cli(&["lsa", "--data", "d", "--out", "l"], tmp.path());
    assert_eq!(out.status.code(), Some(EXIT_OK));
    assert!(String::from_utf8_lossy(&out.stderr).contains("degenerate"));
}

#[test]
fn lsa_on_identical_populations_scores_zero_and_picks_deepest() {
    let tmp = TempDir::new().unwrap();
    synth_small(tmp.path(), "d", &[]);
    // Every layer repeats layer 0, and each edited sample carries its source's
    // features. Each split real has exactly one edit, so the classes coincide.
    let m = load_manifest(tmp.path().join("d/manifest.jsonl")).unwrap();
    let real = read_feature_stack(tmp.path().join("d/real.lfs")).unwrap();
    let edited = read_feature_stack(tmp.path().join("d/edited.lfs")).unwrap();
    let real = &real;
    let repeat = |rows: Vec<usize>, ids: &[String]| {
        let data = rows
            .iter()
            .flat_map(|&j| (0..real.n_layers()).flat_map(move |_| real.vector(j, 0).iter().copied()))
            .collect();
        FeatureStack::new(real.n_layers(), real.dim(), data, ids.to_vec()).unwrap()
    };
    let sources: Vec<usize> = edited
        .sample_ids()
        .iter()
        .map(|id| {
            let src = &m.records.iter().find(|r| &r.sample_id == id).unwrap().src_id;
            real.index_of(src).unwrap()
        })
        .collect();
    write_feature_stack(&repeat((0..real.n_samples()).collect(), real.sample_ids()), tmp.path().join("d/real.lfs")).unwrap();
    write_feature_stack(&repeat(sources, edited.sample_ids()), tmp.path().join("d/edited.lfs")).unwrap();
    ok(&["lsa", "--data", "d", "--out", "l"], tmp.path());
    let text = fs::read_to_string(tmp.path().join("l").join(LSA_REPORT)).unwrap();
    let mut lines = text.lines();
    let sel: serde_json::Value = serde_json::from_str(lines.next().unwrap()).unwrap();
    assert_eq!(sel["selected_layer"], 5);
    for line in lines {
        let p: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(p["d_kl"].as_f64().unwrap(), 0.0);
        assert_eq!(p["ldr"].as_f64().unwrap(), 0.0);
        assert_eq!(p["score"].as_f64().unwrap(), 0.0, "{line}");
    }
}

#[test]
fn lsa_recovers_planted_layer_and_honors_override() {
    let tmp = TempDir::new().unwrap();
    synth_small(tmp.path(), "d", &["--informative-layer", "2"]);
    ok(&["lsa", "--data", "d", "--out", "a"], tmp.path());
    ok(&["lsa", "--data", "d", "--out", "b", "--layer-override", "4"], tmp.path());
    let first = |dir: &str| -> serde_json::Value {
        let text = fs::read_to_string(tmp.path().join(dir).join(LSA_REPORT)).unwrap();
        serde_json::from_str(text.lines().next().unwrap()).unwrap()
    };
    assert_eq!(first("a")["selected_layer"], 2);
    assert_eq!(first("b")["selected_layer"], 4);
    assert_eq!(first("b")["argmax_layer"], 2);
    assert_eq!(first("b")["overridden"], true);
    assert_eq!(code(&["lsa", "--data", "d", "--layer-override", "6"], tmp.path()), EXIT_DATA);
}

#[test]
fn zero_epochs_writes_the_initial_checkpoint() {
    let tmp = TempDir::new().unwrap();
    synth_small(tmp.path(), "d", &[]);
    ok(
        &[
            "train", "--data", "d", "--layer-override", "3", "--epochs", "0", "--seed", "11", "--out-dim", "16",
            "--hidden", "12", "--rank", "4", "--out", "m",
        ],
        tmp.path(),
    );
    let saved = read_checkpoint(tmp.path().join("m").join(CHECKPOINT)).unwrap();
    let cfg = TrainConfig {
        layer: 3,
        out_dim: 16,
        hidden: 12,
        rank: 4,
        seed: 11,
        ..TrainConfig::default()
    };
    let init = initial_checkpoint(&cfg, 16).unwrap();
    assert_eq!(saved.to_bytes().unwrap(), init.to_bytes().unwrap());
    let trace = fs::read_to_string(tmp.path().join("m/trace.jsonl")).unwrap();
    assert!(trace.is_empty());
}

#[test]
fn full_pipeline_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    synth_small(tmp.path(), "d", &[]);
    pipeline(tmp.path(), "d", "x");
    pipeline(tmp.path(), "d", "y");
    for f in [format!("lsa/{LSA_REPORT}"), format!("model/{CHECKPOINT}"), "model/trace.jsonl".into(), format!("report/{REPORT}"), "report/report.txt".into()] {
        let a = read(tmp.path().join(format!("x-{f}")));
        let b = read(tmp.path().join(format!("y-{f}")));
        assert!(!a.is_empty(), "{f} is empty");
        assert_eq!(a, b, "{f} differs between runs");
    }
    let trace = fs::read_to_string(tmp.path().join("x-model/trace.jsonl")).unwrap();
    let stages: Vec<String> = trace
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["stage"].as_str().unwrap().to_owned())
        .collect();
    let first_head = stages.iter().position(|s| s != "contrastive").unwrap();
    assert!(stages[..first_head].iter().all(|s| s == "contrastive"));
    assert!(stages[first_head..].iter().all(|s| s != "contrastive"));
}

#[test]
fn report_covers_every_editor_and_overall() {
    let tmp = TempDir::new().unwrap();
    synth_small(tmp.path(), "d", &[]);
    pipeline(tmp.path(), "d", "x");
    let text = fs::read_to_string(tmp.path().join("x-report").join(REPORT)).unwrap();
    let rows: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let detection: Vec<&str> = rows
        .iter()
        .filter(|r| r["kind"] == "detection")
        .map(|r| r["editor"].as_str().unwrap())
        .collect();
    assert_eq!(detection, ["editor-00", "editor-01", "editor-02", "editor-03", "Overall"]);
    assert_eq!(rows.iter().filter(|r| r["kind"] == "quality").count(), 3);
    let table = fs::read_to_string(tmp.path().join("x-report/report.txt")).unwrap();
    assert!(table.contains("Overall"));
}

#[test]
fn exit_codes() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(code(&["bogus"], tmp.path()), EXIT_USAGE);
    assert_eq!(code(&["synth"], tmp.path()), EXIT_USAGE);
    assert_eq!(code(&["synth", "--out", "x", "--seed", "abc"], tmp.path()), EXIT_USAGE);
    assert_eq!(code(&["--help"], tmp.path()), EXIT_OK);
    assert_eq!(code(&["lsa", "--data", "missing"], tmp.path()), EXIT_DATA);
    assert_eq!(code(&["train", "--data", "missing", "--out", "m"], tmp.path()), EXIT_DATA);

    synth_small(tmp.path(), "d", &[]);
    assert_eq!(code(&["inspect", "d/real.lfs"], tmp.path()), EXIT_OK);
    let mut bytes = read(tmp.path().join("d/real.lfs"));
    bytes.truncate(bytes.len() - 3);
    fs::write(tmp.path().join("cut.lfs"), &bytes).unwrap();
    assert_eq!(code(&["inspect", "cut.lfs"], tmp.path()), EXIT_DATA);
    fs::write(tmp.path().join("junk.bin"), b"JUNKJUNKJUNK").unwrap();
    assert_eq!(code(&["inspect", "junk.bin"], tmp.path()), EXIT_DATA);
}

#[test]
fn inspect_describes_both_formats() {
    let tmp = TempDir::new().unwrap();
    synth_small(tmp.path(), "d", &[]);
    let text = ok(&["inspect", "d/edited.lfs"], tmp.path());
    assert!(text.contains("LFS1"));
    assert!(text.contains("n_samples: 96"));
    assert!(text.contains("n_layers: 6"));
    ok(&["train", "--data", "d", "--layer-override", "1", "--epochs", "0", "--out", "m"], tmp.path());
    let text = ok(&["inspect", "m/model.llm"], tmp.path());
    assert!(text.contains("LLM1"));
    assert!(text.contains("layer: 1"));
}

#[test]
fn config_file_sits_between_defaults_and_flags() {
    let tmp = TempDir::new().unwrap();
    fs::write(tmp.path().join("c.jsonl"), "{\"per_editor\": 7, \"layers\": 3}\n{\"seed\": 4}\n").unwrap();
    ok(&["synth", "--config", "c.jsonl", "--out", "d", "--layers", "5", "--editors", "2"], tmp.path());
    let stack = read_feature_stack(tmp.path().join("d/edited.lfs")).unwrap();
    assert_eq!((stack.n_samples(), stack.n_layers()), (14, 5));

    // The echoed config reproduces the run.
    ok(&["synth", "--config", "d/config.jsonl", "--out", "e"], tmp.path());
    assert_eq!(read(tmp.path().join("d/edited.lfs")), read(tmp.path().join("e/edited.lfs")));
    let echo = fs::read_to_string(tmp.path().join("d").join(CONFIG_ECHO)).unwrap();
    assert!(echo.contains("{\"seed\":4}"));
    assert!(echo.contains("{\"layers\":5}"));
}

#[test]
fn manifest_splits_keep_sources_together() {
    let tmp = TempDir::new().unwrap();
    synth_small(tmp.path(), "d", &[]);
    let m = load_manifest(tmp.path().join("d/manifest.jsonl")).unwrap();
    let mut by_src = std::collections::HashMap::new();
    for r in &m.records {
        let s = by_src.entry(r.src_id.clone()).or_insert(r.split);
        assert_eq!(*s, r.split, "{} spans splits", r.src_id);
    }
    for split in [Split::Train, Split::Val, Split::Test] {
        assert!(m.records.iter().any(|r| r.split == Some(split)));
    }
}

#[test]
fn detection_stays_at_chance_without_a_planted_shift() {
    let tmp = TempDir::new().unwrap();
    ok(
        &[
            "synth", "--out", "d", "--seed", "21", "--editors", "4", "--per-editor", "60", "--layers", "4", "--dim",
            "16", "--shift", "0",
        ],
        tmp.path(),
    );
    let mut args = vec!["train", "--data", "d", "--layer-override", "3", "--out", "m", "--epochs", "5"];
    args.extend_from_slice(&SMALL_TRAIN[2..]);
    ok(&args, tmp.path());
    ok(&["eval", "--data", "d", "--checkpoint", "m/model.llm", "--out", "r"], tmp.path());
    let text = fs::read_to_string(tmp.path().join("r").join(REPORT)).unwrap();
    let overall: serde_json::Value = text
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .find(|r| r["kind"] == "detection" && r["editor"] == "Overall")
        .unwrap();
    let n = overall["n"].as_f64().unwrap();
    let acc = overall["accuracy"].as_f64().unwrap();
    let three_sigma = 3.0 * (0.25 / n).sqrt();
    assert!((acc - 0.5).abs() <= three_sigma, "accuracy {acc} over {n} samples");
}
