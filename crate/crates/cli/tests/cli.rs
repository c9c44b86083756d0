use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn sonovis(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sonovis")).args(args).output().unwrap()
}

fn ok(args: &[&str]) {
    let out = sonovis(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

/// Exit code and the parsed single-line error.
fn fails(args: &[&str]) -> (i32, Value) {
    let out = sonovis(args);
    let stderr = String::from_utf8(out.stderr).unwrap();
    let lines: Vec<&str> = stderr.lines().collect();
    assert_eq!(lines.len(), 1, "{stderr}");
    (out.status.code().unwrap(), serde_json::from_str(lines[0]).unwrap())
}

fn json(p: &Path) -> Value {
    serde_json::from_slice(&fs::read(p).unwrap()).unwrap()
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn gen(out: &Path, seed: &str) {
    ok(&["gen-synth", "--out", &s(out), "--seed", seed, "--train", "8", "--val", "0", "--test", "4", "--image-size", "32", "--mics", "2", "--duration", "0.5"]);
}

fn train_vq(manifest: &Path, out: &Path, latent: &str, steps: &str, extra: &[&str]) {
    let (manifest, out) = (s(manifest), s(out));
    let mut args = vec![
        "train-vqvae", "--manifest", &manifest, "--out", &out, "--image-size", "32", "--latent-size", latent,
        "--code-dim", "8", "--codebook-size", "8", "--first-features", "4", "--hidden-features", "4",
        "--residual-blocks", "1", "--max-steps", steps, "--batch-size", "4", "--seed", "5",
    ];
    args.extend_from_slice(extra);
    ok(&args);
}

#[test]
fn gen_synth_same_seed_gives_identical_dataset_hash() {
    let dir = tempfile::tempdir().unwrap();
    let hash = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        gen(&out, seed);
        json(&out.join("run-log.json"))["output_hash"].as_str().unwrap().to_string()
    };
    let (a, b, c) = (hash("a", "7"), hash("b", "7"), hash("c", "8"));
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(a.len(), 64);
}

#[test]
fn run_log_records_seed_hashes_and_time() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen(&data, "3");
    let vq = dir.path().join("vq");
    train_vq(&data.join("manifest.jsonl"), &vq, "8", "2", &[]);
    let log = json(&vq.join("run-log.json"));
    assert_eq!(log["command"], "train-vqvae");
    assert_eq!(log["seed"], 5);
    assert_eq!(log["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(log["inputs_hash"].as_str().unwrap().len(), 64);
    assert!(log["wall_time_seconds"].as_f64().unwrap() > 0.0);
    assert_eq!(log["config"]["model"]["latent_size"], 8);
}

#[test]
fn flags_override_config_and_unknown_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("gen.toml");
    let out = dir.path().join("data");
    fs::write(&cfg, format!("out = {:?}\nseed = 1\n\n[synth]\ntrain = 4\nval = 0\ntest = 2\nimage_size = 32\nmics = 2\nduration_seconds = 0.5\n", s(&out))).unwrap();
    ok(&["gen-synth", "--config", &s(&cfg), "--seed", "2", "--train", "3"]);
    let log = json(&out.join("run-log.json"));
    assert_eq!(log["seed"], 2);
    assert_eq!(log["config"]["synth"]["train"], 3);
    assert_eq!(log["config"]["synth"]["test"], 2);

    fs::write(&cfg, "seed = 1\nsedd = 2\n").unwrap();
    let (code, err) = fails(&["gen-synth", "--config", &s(&cfg), "--out", &s(&dir.path().join("x"))]);
    assert_eq!(code, 2);
    assert_eq!(err["error"], "config");
    assert!(err["message"].as_str().unwrap().contains("sedd"));
    assert!(!dir.path().join("x").exists());
}

#[test]
fn missing_inputs_exit_with_their_own_code() {
    let dir = tempfile::tempdir().unwrap();
    let (code, err) = fails(&["train-vqvae", "--manifest", &s(&dir.path().join("nope.jsonl")), "--out", &s(&dir.path().join("vq"))]);
    assert_eq!(code, 3);
    assert_eq!(err["error"], "missing-input");
    assert_eq!(err["exit_code"], 3);
    let (code, _) = fails(&["evaluate", "--predictions", &s(&dir.path().join("p")), "--ground-truth", &s(dir.path())]);
    assert_eq!(code, 3);
}

#[test]
fn atnet_with_other_latent_grid_than_manifold_is_incompatible() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen(&data, "4");
    let manifest = data.join("manifest.jsonl");
    let vq = dir.path().join("vq16");
    train_vq(&manifest, &vq, "16", "1", &[]);
    assert_eq!(json(&vq.join("manifold-info.json"))["latent_size"], 16);
    let at = dir.path().join("at");
    let (code, err) = fails(&[
        "train-atnet", "--manifest", &s(&manifest), "--vq", &s(&vq), "--out", &s(&at),
        "--latent-size", "8", "--code-dim", "8", "--resnet-width", "2", "--mlp-hidden", "8,8", "--start-channels", "8",
        "--window-sec", "0.5", "--mels", "32", "--size", "32", "--max-steps", "1",
    ]);
    assert_eq!(code, 4);
    assert_eq!(err["error"], "incompatible");
    assert!(err["message"].as_str().unwrap().contains("16x16"));
    // nothing half-written next to the target
    let names: Vec<String> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    assert!(names.iter().all(|n| !n.trim_start_matches('.').starts_with("at")), "{names:?}");
}

#[test]
fn bad_flag_values_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen(&data, "4");
    let manifest = data.join("manifest.jsonl");
    let vq = dir.path().join("vq");
    train_vq(&manifest, &vq, "8", "1", &[]);
    let (code, err) = fails(&[
        "train-atnet", "--manifest", &s(&manifest), "--vq", &s(&vq), "--out", &s(&dir.path().join("at")),
        "--latent-size", "8", "--code-dim", "8", "--mlp-hidden", "8,8,8",
    ]);
    assert_eq!((code, err["error"].as_str().unwrap()), (2, "config"));
    let (code, _) = fails(&["train-vqvae", "--manifest", &s(&manifest), "--out", &s(&dir.path().join("v2")), "--latent-size", "5"]);
    assert_eq!(code, 2);
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen(&data, "9");
    let manifest = data.join("manifest.jsonl");
    let (straight, split) = (dir.path().join("straight"), dir.path().join("split"));
    train_vq(&manifest, &straight, "8", "6", &["--restart-dead-codes"]);
    train_vq(&manifest, &split, "8", "3", &["--restart-dead-codes"]);
    train_vq(&manifest, &split, "8", "6", &["--restart-dead-codes", "--resume"]);
    assert_eq!(json(&split.join("meta.json"))["global_step"], 6);
    for sub in ["params", "optim"] {
        let mut names: Vec<_> = fs::read_dir(straight.join(sub)).unwrap().map(|e| e.unwrap().file_name()).collect();
        names.sort();
        assert!(!names.is_empty());
        for n in names {
            let (a, b) = (fs::read(straight.join(sub).join(&n)).unwrap(), fs::read(split.join(sub).join(&n)).unwrap());
            assert!(a == b, "{sub}/{n:?} differs");
        }
    }
}

#[test]
fn full_chain_writes_predictions_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen(&data, "11");
    let manifest = data.join("manifest.jsonl");
    let spec = dir.path().join("spec");
    ok(&["preprocess", "--in", &s(&data.join("audio")), "--out", &s(&spec), "--window-sec", "0.5", "--mels", "32", "--size", "32"]);
    assert!(spec.join("pipeline.json").is_file());
    let vq = dir.path().join("vq");
    train_vq(&manifest, &vq, "8", "2", &[]);
    let at = dir.path().join("at");
    ok(&[
        "train-atnet", "--manifest", &s(&manifest), "--vq", &s(&vq), "--out", &s(&at), "--spectrograms", &s(&spec),
        "--latent-size", "8", "--code-dim", "8", "--resnet-width", "2", "--mlp-hidden", "8,8", "--start-channels", "8",
        "--window-sec", "0.5", "--mels", "32", "--size", "32", "--max-steps", "2", "--batch-size", "4",
    ]);
    let pred = dir.path().join("pred");
    ok(&["infer", "--model", &s(&at), "--vq", &s(&vq), "--manifest", &s(&manifest), "--out", &s(&pred)]);
    let info = json(&pred.join("prediction-info.json"));
    assert_eq!(info["ids"].as_array().unwrap().len(), 4);
    ok(&["evaluate", "--predictions", &s(&pred), "--ground-truth", &s(&data.join("depth"))]);
    let report = json(&pred.join("report.json"));
    assert_eq!(report["modality"], "depth");
    assert!(report["depth"]["abs_rel"].as_f64().unwrap().is_finite());
    assert!(pred.join("report.txt").is_file());
}
