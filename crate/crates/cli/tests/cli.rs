use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL_PATCH: [&str; 8] = [
    "--set",
    "attack.patch_size=16",
    "--set",
    "attack.placement.height=16",
    "--set",
    "attack.placement.width=16",
    "--set",
    "attack.checkpoint_every=2",
];

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_advpatch"))
        .current_dir(dir)
        .env_remove("ADVPATCH_OUTPUT_ROOT")
        .args(args)
        .output()
        .expect("spawn advpatch")
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

fn prepared() -> (TempDir, PathBuf) {
    let tmp = TempDir::new().unwrap();
    ok(tmp.path(), &["--out", "o", "prepare-data"]);
    let out = tmp.path().join("o");
    (tmp, out)
}

fn with(extra: &[&'static str]) -> Vec<&'static str> {
    let mut v = vec!["--out", "o"];
    v.extend_from_slice(&SMALL_PATCH);
    v.extend_from_slice(extra);
    v
}

fn png_size(path: &Path) -> (u32, u32) {
    let bytes = fs::read(path).unwrap();
    assert_eq!(&bytes[1..4], b"PNG");
    let be = |i: usize| u32::from_be_bytes(bytes[i..i + 4].try_into().unwrap());
    (be(16), be(20))
}

#[test]
fn prepare_data_is_idempotent() {
    let (tmp, out) = prepared();
    let files = ["instances_train.json", "instances_test.json", "summary.json"];
    let first: Vec<Vec<u8>> = files.iter().map(|f| fs::read(out.join("data").join(f)).unwrap()).collect();
    let stdout = ok(tmp.path(), &["--out", "o", "prepare-data"]);
    assert!(stdout.contains("train=10 test=4"), "{stdout}");
    for (f, before) in files.iter().zip(first) {
        assert_eq!(fs::read(out.join("data").join(f)).unwrap(), before, "{f}");
    }
}

#[test]
fn prepare_data_class_filter() {
    let tmp = TempDir::new().unwrap();
    ok(tmp.path(), &["--out", "o", "--set", "dataset.classes=[\"red\"]", "prepare-data"]);
    let summary: serde_json::Value =
        serde_json::from_slice(&fs::read(tmp.path().join("o/data/summary.json")).unwrap()).unwrap();
    let per_class = &summary["dataset"]["per_class"];
    assert!(per_class["red"].as_u64().unwrap() > 0, "{summary}");
    assert_eq!(per_class["green"].as_u64().unwrap_or(0), 0, "{summary}");
}

#[test]
fn train_patch_writes_one_metrics_row_per_epoch() {
    let (tmp, out) = prepared();
    let stdout = ok(tmp.path(), &with(&["--set", "attack.epochs=50", "train-patch"]));
    assert!(stdout.contains("epochs=50"));
    let metrics = fs::read_to_string(out.join("patch/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 51);
    assert!(metrics.starts_with("epoch,detector_loss,tv_loss,g_loss,d_loss,total_loss"));
    for name in ["patch.png", "patch.json", "config.json", "experiment.toml", "state.json"] {
        assert!(out.join("patch").join(name).exists(), "{name}");
    }
    let ck: Vec<_> = fs::read_dir(out.join("patch/checkpoints")).unwrap().collect();
    assert_eq!(ck.len(), 25);
}

#[test]
fn resumed_cli_run_matches_uninterrupted() {
    let (tmp, out) = prepared();
    ok(tmp.path(), &with(&["--set", "attack.epochs=6", "train-patch"]));
    let full_metrics = fs::read(out.join("patch/metrics.csv")).unwrap();
    let full_patch = fs::read(out.join("patch/patch.json")).unwrap();
    fs::remove_dir_all(out.join("patch")).unwrap();

    ok(tmp.path(), &with(&["--set", "attack.epochs=3", "train-patch"]));
    ok(tmp.path(), &with(&["--set", "attack.epochs=6", "train-patch", "--resume"]));
    assert_eq!(fs::read(out.join("patch/metrics.csv")).unwrap(), full_metrics);
    assert_eq!(fs::read(out.join("patch/patch.json")).unwrap(), full_patch);

    let changed = run(tmp.path(), &with(&["--set", "attack.epochs=8", "--set", "attack.lr=0.5", "train-patch", "--resume"]));
    assert_eq!(changed.status.code(), Some(2));
}

#[test]
fn validation_failures_exit_with_code_one() {
    let tmp = TempDir::new().unwrap();
    let cases: [&[&str]; 5] = [
        &["--set", "attack.learning_rate=0.1", "prepare-data"],
        &["--set", "attack.epochs=0", "prepare-data"],
        &["--config", "missing.toml", "prepare-data"],
        &["--out", "o", "train-patch"],
        &["--out", "o", "--set", "attack.source=frozen_generator", "train-gan", "--bogus"],
    ];
    for args in cases {
        let out = run(tmp.path(), args);
        assert_eq!(out.status.code(), Some(1), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(!tmp.path().join("o").exists(), "{args:?} wrote output");
    }
}

#[test]
fn missing_coco_inputs_are_reported() {
    let tmp = TempDir::new().unwrap();
    let out = run(tmp.path(), &["--set", "dataset.kind=coco", "prepare-data"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dataset.train_annotations"));
}

#[test]
fn config_file_and_overrides_compose() {
    let (tmp, out) = prepared();
    fs::write(
        tmp.path().join("exp.toml"),
        "name = \"demo\"\n[attack]\nepochs = 4\npatch_size = 16\nlr = 0.02\n[attack.placement]\nx = 0\ny = 0\nheight = 16\nwidth = 16\n",
    )
    .unwrap();
    ok(tmp.path(), &["--config", "exp.toml", "--out", "o", "--set", "attack.epochs=2", "train-patch"]);
    let metrics = fs::read_to_string(out.join("patch/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    let snap = fs::read_to_string(out.join("patch/experiment.toml")).unwrap();
    assert!(snap.contains("# override (last writer wins): attack.epochs=2"));
    assert!(snap.contains("lr = 0.02"));
}

#[test]
fn train_gan_writes_checkpoint_and_sample_grid() {
    let tmp = TempDir::new().unwrap();
    let args = [
        "--out", "o", "--set", "corpus.kind=flowers", "--set", "gan.epochs=1", "--set", "gan.steps_per_epoch=1",
        "--set", "gan.sample_tiles=3", "train-gan",
    ];
    ok(tmp.path(), &args);
    let ck = tmp.path().join("o/gan/checkpoints");
    let dirs: Vec<_> = fs::read_dir(&ck).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(dirs, ["epoch_000001"]);
    assert_eq!(png_size(&ck.join("epoch_000001/samples.png")), (48, 48));
    assert!(tmp.path().join("o/gan/generator.json").exists());
    assert_eq!(fs::read_to_string(tmp.path().join("o/gan/metrics.csv")).unwrap().lines().count(), 2);
}

#[test]
fn eval_conditions_and_determinism() {
    let (tmp, out) = prepared();
    ok(tmp.path(), &["--out", "o", "eval"]);
    let table = fs::read_to_string(out.join("eval/comparison.csv")).unwrap();
    assert!(table.starts_with("metric,clean\n"), "{table}");
    let first = fs::read(out.join("eval/clean.json")).unwrap();
    ok(tmp.path(), &["--out", "o", "eval"]);
    assert_eq!(fs::read(out.join("eval/clean.json")).unwrap(), first);

    ok(tmp.path(), &with(&["--set", "attack.epochs=2", "train-patch"]));
    ok(
        tmp.path(),
        &with(&["--set", "eval.black_baseline=true", "eval", "--patch", "o/patch/patch.json"]),
    );
    let table = fs::read_to_string(out.join("eval/comparison.csv")).unwrap();
    assert!(table.starts_with("metric,clean,black,patch\n"), "{table}");
    let black: serde_json::Value = serde_json::from_slice(&fs::read(out.join("eval/black.json")).unwrap()).unwrap();
    assert!(black["proximity"].is_object());
}

#[test]
fn render_draws_images() {
    let (tmp, out) = prepared();
    let stdout = ok(tmp.path(), &["--out", "o", "render", "--image", "o/data/synth_00001.png"]);
    assert!(stdout.contains("detections="));
    assert_eq!(png_size(&out.join("render/synth_00001.png")), (64, 64));
}
