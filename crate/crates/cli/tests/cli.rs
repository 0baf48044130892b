use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bitstain(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bitstain"))
        .arg("--output-root")
        .arg(root)
        .args(["--log-level", "warn"])
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn run_dirs(root: &Path, sub: &str) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(root)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap().to_string_lossy().starts_with(&format!("{sub}_")))
        .collect();
    v.sort();
    v
}

fn only_run(root: &Path, sub: &str) -> PathBuf {
    let v = run_dirs(root, sub);
    assert_eq!(v.len(), 1, "{v:?}");
    v.into_iter().next().unwrap()
}

fn synth(root: &Path, extra: &[&str]) -> PathBuf {
    let o = bitstain(root, &[&["synth"], extra].concat());
    assert!(o.status.success(), "{}", stderr(&o));
    run_dirs(root, "synth").pop().unwrap()
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["bit", "he", "labels"] {
        let mut files: Vec<PathBuf> = fs::read_dir(dir.join(sub)).unwrap().map(|e| e.unwrap().path()).collect();
        files.sort();
        for f in files {
            out.push((f.strip_prefix(dir).unwrap().display().to_string(), fs::read(&f).unwrap()));
        }
    }
    out
}

#[test]
fn synth_writes_volumes_and_manifest() {
    let tmp = TempDir::new().unwrap();
    let dir = synth(tmp.path(), &["--seed", "4"]);
    for sub in ["bit", "he", "labels"] {
        assert!(dir.join(sub).is_dir(), "{sub}");
    }
    let m = manifest(&dir);
    assert_eq!(m["status"], "succeeded");
    assert_eq!(m["subcommand"], "synth");
    assert_eq!(m["config"]["seed"], 4);
    let cfg = fs::read_to_string(dir.join("config.toml")).unwrap();
    assert!(cfg.contains("seed = 4"), "{cfg}");
}

#[test]
fn synth_is_reproducible() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let da = synth(a.path(), &["--seed", "9"]);
    let db = synth(b.path(), &["--seed", "9"]);
    assert_eq!(tree_bytes(&da), tree_bytes(&db));
}

#[test]
fn synth_without_nuclei_gives_empty_labels() {
    let tmp = TempDir::new().unwrap();
    let dir = synth(tmp.path(), &["--override", "nuclei_count=0"]);
    let labels = bitstain_core::data::load_labels(dir.join("labels")).unwrap();
    assert!(labels.data().iter().all(|&v| v == 0));
    let bit = bitstain_core::data::load_gray8(dir.join("bit")).unwrap();
    assert_eq!(bit.dims(), labels.dims());
}

#[test]
fn unknown_config_key_exits_one() {
    let tmp = TempDir::new().unwrap();
    let o = bitstain(tmp.path(), &["synth", "--override", "nuclei=3"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nuclei"), "{}", stderr(&o));
    assert!(run_dirs(tmp.path(), "synth").is_empty());
}

#[test]
fn missing_dataset_names_the_path() {
    let tmp = TempDir::new().unwrap();
    let missing = tmp.path().join("no_such_volume");
    let o = bitstain(
        tmp.path(),
        &["train", "--bit", missing.to_str().unwrap(), "--he", missing.to_str().unwrap()],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("no_such_volume"), "{}", stderr(&o));
}

#[test]
fn bad_arguments_exit_one() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(bitstain(tmp.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(bitstain(tmp.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn eval_of_ground_truth_against_itself() {
    let tmp = TempDir::new().unwrap();
    let dir = synth(tmp.path(), &["--seed", "2"]);
    let labels = dir.join("labels");
    let o = bitstain(tmp.path(), &["eval", "--pred", labels.to_str().unwrap(), "--gt", labels.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let run = only_run(tmp.path(), "eval");
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(m["dice3d"], 1.0);
    assert_eq!(m["hd95_um"], 0.0);
    assert!(m["fid"].is_null() && m["kid"].is_null());
    assert!(m["absent"]["fid"].is_string());
    assert_eq!(m["stacking"], "greedy-iou-2d-to-3d");
}

#[test]
fn eval_segments_rgb_predictions_and_reads_features() {
    let tmp = TempDir::new().unwrap();
    let dir = synth(tmp.path(), &["--seed", "3"]);
    let fa = tmp.path().join("a.csv");
    let fb = tmp.path().join("b.csv");
    fs::write(&fa, "4,2,toy\n0.1,0.2\n0.3,0.1\n0.5,0.9\n0.2,0.2\n").unwrap();
    fs::write(&fb, "3,2,toy\n0.2,0.2\n0.4,0.1\n0.6,0.8\n").unwrap();
    let o = bitstain(
        tmp.path(),
        &[
            "eval",
            "--pred",
            dir.join("he").to_str().unwrap(),
            "--gt",
            dir.join("labels").to_str().unwrap(),
            "--feats-pred",
            fa.to_str().unwrap(),
            "--feats-real",
            fb.to_str().unwrap(),
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let run = only_run(tmp.path(), "eval");
    assert!(run.join("pred_labels").is_dir());
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("metrics.json")).unwrap()).unwrap();
    assert!(m["dice3d"].as_f64().unwrap() > 0.9);
    assert!(m["fid"].as_f64().unwrap() >= 0.0);
    assert!(m["kid"].is_number());
}

#[test]
fn malformed_features_name_file_and_line() {
    let tmp = TempDir::new().unwrap();
    let dir = synth(tmp.path(), &[]);
    let good = tmp.path().join("good.csv");
    let bad = tmp.path().join("bad.csv");
    fs::write(&good, "3,2,toy\n1,2\n3,4\n5,7\n").unwrap();
    fs::write(&bad, "3,2,toy\n1,2\n5,x\n3,4\n").unwrap();
    let labels = dir.join("labels");
    let o = bitstain(
        tmp.path(),
        &[
            "eval",
            "--pred",
            labels.to_str().unwrap(),
            "--gt",
            labels.to_str().unwrap(),
            "--feats-pred",
            good.to_str().unwrap(),
            "--feats-real",
            bad.to_str().unwrap(),
        ],
    );
    assert_ne!(o.status.code(), Some(0));
    let err = stderr(&o);
    assert!(err.contains("bad.csv:3"), "{err}");
    assert_eq!(manifest(&only_run(tmp.path(), "eval"))["status"], "failed");
}

const TINY: &str = r#"
epochs = 2
pretrain_epochs = 1
batch_size = 2

[generator]
input_size = 16
stage_channels = [3, 4, 4]
scale_set = [1, 2, 4, 8]
token_dim = 8
vit_depth = 1
vit_heads = 2

[discriminator]
input_size = 16
base_channels = 4
stages = 2
"#;

#[test]
fn train_resume_and_stain_smoke() {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path();
    let dir = synth(root, &["--override", "volume_dims=[32, 32, 4]", "--override", "nuclei_count=2", "--override", "focal_plane_z=2", "--override", "radius_range_um=[1.0, 1.5]"]);
    let cfg = root.join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let bit = dir.join("bit");
    let he = dir.join("he");
    let data = ["--bit", bit.to_str().unwrap(), "--he", he.to_str().unwrap()];

    let o = bitstain(root, &[&["train", "--config", cfg.to_str().unwrap(), "--override", "lambda_msc=0"], &data[..]].concat());
    assert!(o.status.success(), "{}", stderr(&o));
    let run = only_run(root, "train");
    let resolved = fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(resolved.contains("lambda_msc = 0.0"), "{resolved}");
    assert_eq!(manifest(&run)["config"]["lambda_msc"], 0.0);
    let ckpt2 = run.join("checkpoints/epoch_0002.ckpt");
    let ckpt1 = run.join("checkpoints/epoch_0001.ckpt");
    assert!(ckpt1.is_file() && ckpt2.is_file());
    assert!(run.join("loss_log.jsonl").is_file());
    assert!(run.join("pretrain_log.jsonl").is_file());

    let o = bitstain(root, &[&["train", "--resume", ckpt1.to_str().unwrap()], &data[..]].concat());
    assert!(o.status.success(), "{}", stderr(&o));
    let resumed = run_dirs(root, "train").into_iter().find(|d| d != &run).unwrap();
    assert_eq!(
        fs::read(resumed.join("checkpoints/epoch_0002.ckpt")).unwrap(),
        fs::read(&ckpt2).unwrap()
    );

    let o = bitstain(
        root,
        &[&["train", "--resume", ckpt1.to_str().unwrap(), "--override", "epochs=3"], &data[..]].concat(),
    );
    assert_eq!(o.status.code(), Some(1));

    let o = bitstain(root, &["stain", "--checkpoint", ckpt2.to_str().unwrap(), "--input", bit.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let stained = bitstain_core::data::load_rgb8(only_run(root, "stain").join("stained")).unwrap();
    assert_eq!(stained.dims(), [32, 32, 4]);
    assert_eq!(stained.channels(), 3);
}
