use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn microid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_microid"))
        .args(args)
        .env_remove("MICROID_DATA_ROOT")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = microid(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str]) -> String {
    let out = microid(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

fn manifest_lines(dir: &Path) -> Vec<Value> {
    fs::read_to_string(dir.join("manifest.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

/// Two subjects, four clips each, 16x16 frames, 16-frame window.
fn small_synth(dir: &Path) {
    let out = dir.to_str().unwrap();
    ok(&[
        "synth", "--out-dir", out, "--paths", "1", "--subjects", "2", "--clips-per-subject", "4",
        "--frame-size", "16", "--window", "16", "--motion-span", "6", "--seed", "3",
    ]);
}

const TINY: &[&str] = &[
    "--window", "16", "--base-channels", "4", "--depths", "1", "--stem-stride", "2", "--epochs", "1",
];

fn train_tiny(manifest: &Path, out: &Path, extra: &[&str]) -> String {
    let mut args = vec!["train", "--manifest", manifest.to_str().unwrap(), "--out-dir", out.to_str().unwrap()];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    ok(&args)
}

#[test]
fn synth_defaults_give_eight_subjects_and_160_clips() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&["synth", "--out-dir", dir.path().to_str().unwrap()]);
    assert!(stdout.contains("wrote 160 clips of 64 frames for 8 subjects"), "{stdout}");
    let lines = manifest_lines(dir.path());
    assert_eq!(lines.len(), 160);
    let subjects: std::collections::BTreeSet<u64> =
        lines.iter().map(|l| l["subject_id"].as_u64().unwrap()).collect();
    assert_eq!(subjects.len(), 8);
    assert!(dir.path().join("run_config.json").exists());
}

#[test]
fn synth_minimal_set_and_bad_flags() {
    let dir = tempfile::tempdir().unwrap();
    small_synth(dir.path());
    assert_eq!(manifest_lines(dir.path()).len(), 8);
    assert!(fails(&["synth"]).contains("out-dir"));
    let out = dir.path().join("x");
    fails(&["synth", "--out-dir", out.to_str().unwrap(), "--paths", "2", "--subjects", "3"]);
    fails(&["synth", "--out-dir", out.to_str().unwrap(), "--clips-per-subject", "3"]);
}

#[test]
fn train_writes_outputs_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    small_synth(dir.path());
    let manifest = dir.path().join("manifest.jsonl");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let flags = ["--alpha", "4", "--beta", "0.125", "--solver", "adam", "--lr", "0.001", "--batch", "16"];
    let stdout = train_tiny(&manifest, &a, &flags);
    assert!(stdout.contains("rank-1 accuracy"), "{stdout}");
    assert!(stdout.contains("SlowFast"), "{stdout}");
    for f in ["model.ckpt", "train_report.json", "eval_report.json", "run_config.json"] {
        assert!(a.join(f).exists(), "{f}");
    }
    let run: Value = serde_json::from_str(&fs::read_to_string(a.join("run_config.json")).unwrap()).unwrap();
    assert_eq!(run["model"]["alpha"], 4);
    assert_eq!(run["model"]["beta"], 0.125);
    assert_eq!(run["solver"]["solver"], "adam");
    assert_eq!(run["solver"]["learning_rate"], 0.001);
    assert_eq!(run["solver"]["batch_size"], 16);
    train_tiny(&manifest, &b, &flags);
    assert_eq!(fs::read(a.join("model.ckpt")).unwrap(), fs::read(b.join("model.ckpt")).unwrap());
}

#[test]
fn train_rejects_alpha_that_does_not_divide_the_window() {
    let dir = tempfile::tempdir().unwrap();
    small_synth(dir.path());
    let manifest = dir.path().join("manifest.jsonl");
    let out = dir.path().join("run");
    let mut args = vec!["train", "--manifest", manifest.to_str().unwrap(), "--out-dir", out.to_str().unwrap()];
    args.extend_from_slice(TINY);
    args.extend_from_slice(&["--alpha", "3"]);
    assert!(fails(&args).contains("alpha 3"));
    assert!(!out.join("model.ckpt").exists());
}

#[test]
fn config_file_overrides_flags() {
    let dir = tempfile::tempdir().unwrap();
    small_synth(dir.path());
    let manifest = dir.path().join("manifest.jsonl");
    let cfg = dir.path().join("override.json");
    fs::write(&cfg, r#"{"solver": {"epochs": 0}}"#).unwrap();
    let out = dir.path().join("run");
    let mut args = vec![
        "--config", cfg.to_str().unwrap(), "train", "--manifest", manifest.to_str().unwrap(),
        "--out-dir", out.to_str().unwrap(),
    ];
    args.extend_from_slice(TINY);
    assert!(fails(&args).contains("epochs"));

    fs::write(&cfg, r#"{"model": {"alpha": 2}}"#).unwrap();
    ok(&args);
    let run: Value = serde_json::from_str(&fs::read_to_string(out.join("run_config.json")).unwrap()).unwrap();
    assert_eq!(run["model"]["alpha"], 2);
}

#[test]
fn data_root_resolves_relative_manifests() {
    let dir = tempfile::tempdir().unwrap();
    small_synth(dir.path());
    let out = dir.path().join("run");
    let mut args = vec!["grid", "--manifest", "manifest.jsonl", "--out-dir", out.to_str().unwrap(), "--dry-run"];
    args.extend_from_slice(TINY);
    let status = Command::new(env!("CARGO_BIN_EXE_microid"))
        .args(&args)
        .env("MICROID_DATA_ROOT", dir.path())
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
}

#[test]
fn grid_dry_run_lists_sixteen_cells_and_empty_grid_fails() {
    let dir = tempfile::tempdir().unwrap();
    small_synth(dir.path());
    let manifest = dir.path().join("manifest.jsonl");
    let out = dir.path().join("grid");
    let base = ["grid", "--manifest", manifest.to_str().unwrap(), "--out-dir", out.to_str().unwrap()];
    let mut args = base.to_vec();
    args.extend_from_slice(TINY);
    args.push("--dry-run");
    let stdout = ok(&args);
    assert_eq!(stdout.lines().count(), 1 + 16, "{stdout}");
    assert!(!out.join("ranking.json").exists());

    let spec = dir.path().join("grid.json");
    fs::write(&spec, r#"{"alpha": []}"#).unwrap();
    let mut empty = args.clone();
    empty.extend_from_slice(&["--grid", spec.to_str().unwrap()]);
    assert!(fails(&empty).contains("no cells"));
}

#[test]
fn grid_trains_ranks_and_saves_cells() {
    let dir = tempfile::tempdir().unwrap();
    small_synth(dir.path());
    let manifest = dir.path().join("manifest.jsonl");
    let out = dir.path().join("grid");
    let spec = dir.path().join("grid.json");
    fs::write(&spec, r#"{"alpha": [2, 3], "solver": ["adam", "adamw"]}"#).unwrap();
    let mut args = vec![
        "grid", "--manifest", manifest.to_str().unwrap(), "--out-dir", out.to_str().unwrap(),
        "--grid", spec.to_str().unwrap(), "--jobs", "2",
    ];
    args.extend_from_slice(TINY);
    ok(&args);
    let ranking: Vec<Value> =
        serde_json::from_str(&fs::read_to_string(out.join("ranking.json")).unwrap()).unwrap();
    assert_eq!(ranking.len(), 4);
    // alpha 3 cannot divide 16 frames: both such cells fail and rank last
    assert!(ranking[2..].iter().all(|c| c["model"]["alpha"] == 3 && c["accuracy"].is_null()));
    for c in &ranking[..2] {
        let id = c["cell_id"].as_str().unwrap();
        assert!(out.join("checkpoints").join(format!("{id}.ckpt")).exists());
    }
}

/// Class 0 clips show horizontal stripes, class 1 vertical ones.
fn separable_fixture(dir: &Path) -> std::path::PathBuf {
    let mut lines = Vec::new();
    for subject in 0..2u8 {
        for clip in 0..4 {
            let id = format!("s{subject}_c{clip}");
            let frames = dir.join(&id);
            fs::create_dir_all(&frames).unwrap();
            for t in 0..8u32 {
                image::GrayImage::from_fn(8, 8, |x, y| {
                    let k = if subject == 1 { x } else { y };
                    let on = (k + t + clip) / 2 % 2 == 1;
                    image::Luma([if on { 220 } else { 30 }])
                })
                .save(frames.join(format!("{t:06}.png")))
                .unwrap();
            }
            lines.push(format!(
                r#"{{"clip_id":"{id}","frame_dir":"{id}","subject_id":{subject},"apex_index":4,"dataset_name":"toy"}}"#
            ));
        }
    }
    let manifest = dir.join("manifest.jsonl");
    fs::write(&manifest, lines.join("\n")).unwrap();
    manifest
}

#[test]
fn eval_single_ensemble_and_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = separable_fixture(dir.path());
    let m = manifest.to_str().unwrap();
    let run = dir.path().join("run");
    ok(&[
        "train", "--manifest", m, "--out-dir", run.to_str().unwrap(), "--preset", "synth", "--window", "8",
        "--alpha", "2", "--beta", "0.5", "--base-channels", "4", "--depths", "1", "--stem-stride", "2",
        "--epochs", "5", "--lr", "0.01", "--batch", "2", "--channels", "1",
    ]);
    let ckpt = run.join("model.ckpt");
    let c = ckpt.to_str().unwrap();
    let report = dir.path().join("report.json");
    let stdout = ok(&["eval", "--manifest", m, "--checkpoint", c, "--out", report.to_str().unwrap()]);
    assert!(stdout.contains("100.00%"), "{stdout}");
    let json: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["n_hits"], json["n_total"]);

    let pair = format!("{c},{c}");
    let stdout = ok(&["eval", "--manifest", m, "--members", &pair, "--policy", "hard"]);
    assert!(stdout.contains("ensemble"), "{stdout}");
    let spec = dir.path().join("ensemble.json");
    fs::write(&spec, r#"{"members": ["run/model.ckpt", "run/model.ckpt", "run/model.ckpt"], "policy": "soft"}"#)
        .unwrap();
    let stdout = ok(&["eval", "--manifest", m, "--ensemble", spec.to_str().unwrap(), "--subset", "0,2"]);
    assert!(stdout.contains("ensemble"), "{stdout}");
    fails(&["eval", "--manifest", m, "--ensemble", spec.to_str().unwrap(), "--subset", "1"]);

    // a three-subject manifest does not fit a two-class model
    let other = tempfile::tempdir().unwrap();
    let out = other.path().to_str().unwrap();
    ok(&[
        "synth", "--out-dir", out, "--paths", "3", "--subjects", "3", "--clips-per-subject", "4",
        "--frame-size", "8", "--window", "8", "--motion-span", "4",
    ]);
    let wrong = other.path().join("manifest.jsonl");
    let err = fails(&["eval", "--manifest", wrong.to_str().unwrap(), "--checkpoint", c]);
    assert!(err.contains("fingerprint mismatch"), "{err}");
}

#[test]
fn gradcam_writes_one_overlay_per_frame() {
    let dir = tempfile::tempdir().unwrap();
    small_synth(dir.path());
    let manifest = dir.path().join("manifest.jsonl");
    let run = dir.path().join("run");
    train_tiny(&manifest, &run, &["--alpha", "4"]);
    let ckpt = run.join("model.ckpt");
    let out = dir.path().join("cam");
    let base = [
        "gradcam", "--checkpoint", ckpt.to_str().unwrap(), "--manifest", manifest.to_str().unwrap(),
        "--clip-id", "s01_c002", "--out-dir", out.to_str().unwrap(),
    ];
    let mut args = base.to_vec();
    args.push("--dump-raw");
    ok(&args);
    assert_eq!(fs::read_dir(out.join("overlays")).unwrap().count(), 16);
    assert!(out.join("saliency.bin").exists());
    let summary: Value = serde_json::from_str(&fs::read_to_string(out.join("saliency.json")).unwrap()).unwrap();
    assert_eq!(summary["pathway"], "fast");

    let mut slow = base.to_vec();
    slow.extend_from_slice(&["--pathway", "slow", "--class", "1"]);
    ok(&slow);
    let summary: Value = serde_json::from_str(&fs::read_to_string(out.join("saliency.json")).unwrap()).unwrap();
    assert_eq!((summary["pathway"].as_str(), summary["target_class"].as_u64()), (Some("slow"), Some(1)));

    let mut bad = base.to_vec();
    bad.extend_from_slice(&["--class", "7"]);
    assert!(fails(&bad).contains("class 7"));
    let mut missing = base.to_vec();
    missing[6] = "nope";
    fails(&missing);
}
