use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use setrisk_core::corpus::{load_corpus, write_corpus, EmbeddingStore, Label, Post, UserRecord};
use setrisk_core::metrics::MetricsReport;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_setrisk"));
    c.env_remove("SETRISK_OUT");
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

/// Every file in `dir` except the manifest, by name.
fn outputs(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "manifest.json")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect()
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn metrics(dir: &Path) -> MetricsReport {
    serde_json::from_str(&fs::read_to_string(dir.join("metrics.json")).unwrap()).unwrap()
}

const TRAIN_FLAGS: &[&str] = &[
    "--epochs", "3", "--d-model", "16", "--layers", "1", "--heads", "2", "--d-ff", "32",
    "--batch-size", "16", "--lr-min", "1e-4", "--lr-max", "1e-3", "--k", "8",
];

fn gen(dir: &Path) {
    ok(
        dir,
        &["gen-synth", "--out", "gen", "--seed", "4", "--n-pos", "12", "--n-neg", "36", "--dim", "8",
          "--posts-min", "4", "--posts-max", "20"],
    );
}

fn gen_and_train(dir: &Path) {
    gen(dir);
    let mut args = vec!["train", "--manifest", "gen/manifest.json", "--out", "tr"];
    args.extend_from_slice(TRAIN_FLAGS);
    ok(dir, &args);
}

#[test]
fn oracle_pipeline_scores_perfectly() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    gen(d);
    ok(d, &["simulate", "--manifest", "gen/manifest.json", "--out", "sim", "--model", "oracle"]);
    let table = ok(d, &["evaluate", "--manifest", "sim/manifest.json", "--out", "ev"]);
    let r = metrics(&d.join("ev"));
    assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));
    assert_eq!(r.latency_tp, Some(1.0));
    assert!(table.lines().nth(1).unwrap().contains("1.000  1.000  1.000"), "{table}");
}

#[test]
fn all_true_negative_log_has_zero_erde() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let users: Vec<UserRecord> = (0..4)
        .map(|i| UserRecord {
            user_id: format!("n{i}"),
            label: Label::Negative,
            posts: vec![Post { post_id: format!("n{i}_0"), timestamp: 0, text: None }],
        })
        .collect();
    write_corpus(&d.join("labels.jsonl"), &users).unwrap();
    let log: String = (1..=3)
        .flat_map(|r| (0..4).map(move |i| format!("{{\"round\":{r},\"user_id\":\"n{i}\",\"decision\":0,\"score\":0.1}}\n")))
        .collect();
    fs::write(d.join("tn.jsonl"), log).unwrap();
    let table = ok(d, &["evaluate", "--decisions", "tn.jsonl", "--corpus", "labels.jsonl", "--out", "ev"]);
    let r = metrics(&d.join("ev"));
    assert_eq!(r.erde_5, 0.0);
    assert_eq!(r.erde_50, 0.0);
    let row = table.lines().nth(1).unwrap();
    let cols: Vec<&str> = row.split_whitespace().collect();
    assert_eq!(cols[4], "0.000", "{table}");
}

#[test]
fn flags_override_manifest_which_overrides_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    gen(d);
    fs::write(
        d.join("base.json"),
        r#"{"paths": {"corpus": "gen/corpus.jsonl", "embeddings": "gen/embeddings.bin"},
            "seed": 4,
            "model": {"input_dim": 8, "d_model": 8, "n_layers": 1, "n_heads": 2, "d_ff": 16, "dropout_rate": 0.0},
            "train": {"k": 5, "epochs": 2, "effective_batch_size": 8, "lr_min": 1e-4, "lr_max": 1e-3,
                      "cycle_epochs": 6.0, "weight_decay": 0.01, "seed": 0, "val_fraction": 0.25}}"#,
    )
    .unwrap();
    ok(d, &["train", "--manifest", "base.json", "--out", "tr", "--epochs", "1"]);
    let m = manifest(&d.join("tr"));
    assert_eq!(m["train"]["epochs"], 1);
    assert_eq!(m["train"]["k"], 5);
    assert_eq!(m["train"]["seed"], 4);
    assert_eq!(m["workers"], 1);
    assert_eq!(m["policy"]["threshold"], 0.9);
    assert_eq!(m["command"], "train");
    assert_eq!(m["paths"]["checkpoint"], "tr/model.ckpt");
}

#[test]
fn output_dir_comes_from_environment_when_unset() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let out = bin()
        .current_dir(d)
        .env("SETRISK_OUT", "from-env")
        .args(["gen-synth", "--n-pos", "2", "--n-neg", "2", "--dim", "4", "--posts-min", "1", "--posts-max", "3"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(d.join("from-env/corpus.jsonl").is_file());
    ok(d, &["gen-synth", "--n-pos", "2", "--n-neg", "2", "--dim", "4", "--posts-min", "1", "--posts-max", "3"]);
    assert!(d.join("setrisk-out/manifest.json").is_file());
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(code(&run(d, &["frobnicate"])), 1);
    assert_eq!(code(&run(d, &["train", "--epochs", "many"])), 1);
    assert_eq!(code(&run(d, &["train"])), 1, "missing corpus path is a usage error");
    assert_eq!(code(&run(d, &["--manifest", "absent.json", "train"])), 1);
    assert_eq!(code(&run(d, &["train", "--corpus", "absent.jsonl", "--embeddings", "x.bin"])), 2);
    assert_eq!(code(&run(d, &["gen-synth", "--signal-rate", "1.5"])), 1);
    assert_eq!(code(&run(d, &["--help"])), 0);

    fs::write(d.join("bad.jsonl"), "{\"user_id\": 3}\n").unwrap();
    fs::write(d.join("bad.bin"), b"not a store").unwrap();
    assert_eq!(code(&run(d, &["train", "--corpus", "bad.jsonl", "--embeddings", "bad.bin"])), 2);

    gen(d);
    let users = load_corpus(&d.join("gen/corpus.jsonl")).unwrap();
    let store = EmbeddingStore::read(&d.join("gen/embeddings.bin")).unwrap();
    let entries = users
        .iter()
        .flat_map(|u| u.posts.iter().map(move |p| (u, p)))
        .map(|(u, p)| {
            let mut v = store.get(&p.post_id).unwrap().to_vec();
            if u.label.is_positive() {
                v[0] = f32::NAN;
            }
            (p.post_id.clone(), v)
        })
        .collect();
    EmbeddingStore::from_entries("nan", 8, entries).unwrap().write(&d.join("nan.bin")).unwrap();
    let mut args = vec!["train", "--corpus", "gen/corpus.jsonl", "--embeddings", "nan.bin", "--out", "div"];
    args.extend_from_slice(TRAIN_FLAGS);
    let out = run(d, &args);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(d.join("div/last_good.ckpt").is_file());
    assert!(d.join("div/manifest.json").is_file());
}

#[test]
fn every_command_reruns_bit_identically_from_its_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    gen_and_train(d);
    ok(d, &["simulate", "--manifest", "tr/manifest.json", "--out", "sim", "--policy", "ig-selected-k",
            "--k", "4", "--steps", "8", "--users", "validation"]);
    ok(d, &["evaluate", "--manifest", "sim/manifest.json", "--out", "ev"]);
    ok(d, &["attribute", "--manifest", "tr/manifest.json", "--out", "at", "--k", "4", "--steps", "8"]);
    ok(d, &["ablate", "--manifest", "tr/manifest.json", "--out", "ab", "--ks", "2,4", "--epochs", "2"]);

    for (stage, cmd) in [("gen", "gen-synth"), ("tr", "train"), ("sim", "simulate"), ("ev", "evaluate"),
                         ("at", "attribute"), ("ab", "ablate")] {
        let first = d.join(stage);
        let again = format!("{stage}-again");
        let manifest_path = first.join("manifest.json");
        ok(d, &[cmd, "--manifest", manifest_path.to_str().unwrap(), "--out", &again]);
        let (a, b) = (outputs(&first), outputs(&d.join(&again)));
        assert!(!a.is_empty());
        assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>(), "{stage}");
        for (name, bytes) in &a {
            assert!(bytes == &b[name], "{stage}/{name} differs on rerun");
        }
    }
}

#[test]
fn worker_count_does_not_change_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    gen_and_train(d);
    ok(d, &["train", "--manifest", "tr/manifest.json", "--out", "tr4", "--workers", "4"]);
    assert_eq!(outputs(&d.join("tr")), outputs(&d.join("tr4")));
    ok(d, &["simulate", "--manifest", "tr/manifest.json", "--out", "s1"]);
    ok(d, &["simulate", "--manifest", "tr/manifest.json", "--out", "s4", "--workers", "4"]);
    assert_eq!(outputs(&d.join("s1")), outputs(&d.join("s4")));
}

fn digest(paths: &[PathBuf]) -> Vec<Vec<u8>> {
    paths.iter().map(|p| fs::read(p).unwrap()).collect()
}

#[test]
fn commands_leave_inputs_untouched() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    gen_and_train(d);
    let inputs: Vec<PathBuf> = ["gen/corpus.jsonl", "gen/embeddings.bin", "gen/manifest.json", "tr/model.ckpt", "tr/state.ckpt", "tr/manifest.json"]
        .iter()
        .map(|p| d.join(p))
        .collect();
    let before = digest(&inputs);
    ok(d, &["simulate", "--manifest", "tr/manifest.json", "--out", "sim"]);
    ok(d, &["attribute", "--manifest", "tr/manifest.json", "--out", "at", "--user", "user0001"]);
    assert_eq!(digest(&inputs), before);

    let clash = run(d, &["train", "--manifest", "tr/manifest.json", "--resume", "tr/state.ckpt"]);
    assert_eq!(code(&clash), 1, "{}", String::from_utf8_lossy(&clash.stderr));
    let overwrite = run(d, &["train", "--manifest", "gen/manifest.json"]);
    assert_eq!(code(&overwrite), 1);
    assert_eq!(digest(&inputs), before);
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    gen_and_train(d);
    ok(d, &["train", "--manifest", "tr/manifest.json", "--out", "half", "--epochs", "1"]);
    ok(d, &["train", "--manifest", "tr/manifest.json", "--out", "rest", "--resume", "half/state.ckpt"]);
    assert_eq!(outputs(&d.join("tr")), outputs(&d.join("rest")));

    let mismatch = run(d, &["train", "--manifest", "tr/manifest.json", "--out", "bad", "--resume", "half/state.ckpt", "--k", "3"]);
    assert_eq!(code(&mismatch), 1);
}

#[test]
fn unknown_attribution_user_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    gen_and_train(d);
    let out = run(d, &["attribute", "--manifest", "tr/manifest.json", "--out", "at", "--user", "nobody"]);
    assert_eq!(code(&out), 2);
}
