use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use plgan_cli::config::RunConfig;
use serde_json::Value;

fn assets() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../assets")
}

fn plgan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_plgan")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn json_stdout(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = plgan(&["synth", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    for sub in [&["train", "--help"][..], &["eval", "sweep", "--help"], &["synth", "--help"], &["serve", "--help"], &["dataset", "synth", "--help"]] {
        assert_eq!(plgan(sub).status.code(), Some(0), "{sub:?}");
    }
}

#[test]
fn runtime_errors_exit_one_with_a_json_line() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.safetensors");
    let out = plgan(&["synth", "--scene", s(&assets().join("scenes/example.json")), "--checkpoint", s(&missing), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    let line: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(line["error"], "MissingFile");
}

#[test]
fn synth_example_scene_from_random_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("init.safetensors");
    let tax = assets().join("taxonomy/coco_stuff.json");
    json_stdout(&plgan(&["init", "--taxonomy", s(&tax), "--resolution", "128", "--out", s(&ckpt)]));
    let out_dir = dir.path().join("out");
    let summary = json_stdout(&plgan(&[
        "synth",
        "--scene",
        s(&assets().join("scenes/example.json")),
        "--checkpoint",
        s(&ckpt),
        "--out",
        s(&out_dir),
    ]));
    assert_eq!(summary["coverage"], 100.0);
    let image = image::open(out_dir.join("image.png")).unwrap();
    assert_eq!((image.width(), image.height()), (128, 128));
    let layout = image::open(out_dir.join("layout.png")).unwrap();
    assert_eq!((layout.width(), layout.height()), (128, 128));
}

#[test]
fn eval_sweep_writes_three_ranges() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("init.safetensors");
    json_stdout(&plgan(&["init", "--out", s(&ckpt)]));
    let out_dir = dir.path().join("sweep");
    json_stdout(&plgan(&[
        "eval", "sweep", "--checkpoint", s(&ckpt), "--ranges", "0,0.3,0.5", "--seeds", "0,1", "--count", "8", "--out", s(&out_dir),
    ]));
    let csv = std::fs::read_to_string(out_dir.join("sweep.csv")).unwrap();
    let mut ranges: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    ranges.dedup();
    assert_eq!(ranges, ["0", "0.3", "0.5"]);
    assert_eq!(csv.lines().count(), 1 + 3 * 2);
    assert!(out_dir.join("sweep_coverage.svg").exists());
}

#[test]
fn dataset_synth_writes_loadable_annotations() {
    let dir = tempfile::tempdir().unwrap();
    let summary = json_stdout(&plgan(&["dataset", "synth", "--count", "3", "--out", s(dir.path())]));
    assert_eq!(summary["samples"], 3);
    let tax = plgan_core::scene::Taxonomy::load(&dir.path().join("taxonomy.json")).unwrap();
    let stream = plgan_core::data::load_annotations(&dir.path().join("annotations.json"), &tax, 64, 64).unwrap();
    assert_eq!(stream.count(), 3);
}

#[test]
fn short_training_run_logs_every_step() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = RunConfig::toy();
    config.model.generator.widths = vec![8, 4, 4, 4];
    config.model.plg.stuff.widths = vec![4, 4, 4, 4];
    config.train.batch_size = 2;
    config.train.steps = 3;
    config.eval_samples = 4;
    config.output_dir = dir.path().join("run");
    let path = dir.path().join("run.json");
    std::fs::write(&path, config.to_json()).unwrap();
    let summary = json_stdout(&plgan(&["train", "--config", s(&path)]));
    assert_eq!(summary["steps"], 3);
    assert!(summary["bbox_error"].as_f64().unwrap().is_finite());
    let log = std::fs::read_to_string(config.output_dir.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 4);
    assert!(config.output_dir.join("checkpoint.safetensors").exists());

    let summary = json_stdout(&plgan(&[
        "train",
        "--config",
        s(&path),
        "--resume",
        s(&config.output_dir.join("checkpoint.safetensors")),
        "--steps",
        "5",
    ]));
    assert_eq!(summary["steps"], 5);
    let log = std::fs::read_to_string(config.output_dir.join("train_log.csv")).unwrap();
    let steps: Vec<&str> = log.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(steps, ["1", "2", "3", "4", "5"]);
}

#[test]
fn run_config_roundtrips_and_matches_the_shipped_toy_file() {
    let toy = RunConfig::toy();
    let back: RunConfig = serde_json::from_str(&toy.to_json()).unwrap();
    assert_eq!(back, toy);
    let shipped = RunConfig::load(&assets().join("configs/toy_train.json")).unwrap();
    assert_eq!(shipped, toy);
    let printed = json_stdout(&plgan(&["toy-config"]));
    assert_eq!(serde_json::from_value::<RunConfig>(printed).unwrap(), toy);
}
