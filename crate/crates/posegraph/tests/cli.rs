use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use posegraph::checkpoint;
use posegraph::cli::{InstancesFile, MetricsFile};
use posegraph::coco::{CocoDataset, ResultsFile};
use posegraph::config::RunConfig;
use posegraph_core::PoseNet;
use serde_json::Value;

fn posegraph(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_posegraph"))
        .args(args)
        .current_dir(cwd)
        .env_remove("POSEGRAPH_SEED")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const SMALL: &str = r#"{
  "schema_version": 1,
  "data": {"train_count": 10, "eval_count": 3},
  "train": {"epochs": 3, "milestones": [1, 2], "checkpoint_every": 1}
}"#;

fn small_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("cfg.json"), SMALL).unwrap();
    dir
}

#[test]
fn synth_writes_images_annotations_and_manifest() {
    let dir = small_dir();
    ok(&posegraph(&["synth", "--config", "cfg.json", "--out", "ds"], dir.path()));
    let ds = CocoDataset::read(&dir.path().join("ds/train/annotations.json")).unwrap();
    assert_eq!(ds.images.len(), 10);
    let pngs = fs::read_dir(dir.path().join("ds/train/images")).unwrap().count();
    assert_eq!(pngs, 10);
    let eval = CocoDataset::read(&dir.path().join("ds/eval/annotations.json")).unwrap();
    assert_eq!(eval.images.iter().map(|i| i.id).collect::<Vec<_>>(), vec![10, 11, 12]);
    let manifest: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("ds/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["schema_version"], 1);
    assert_eq!(manifest["seed"], 0);
    assert_eq!(manifest["train_count"], 10);
}

#[test]
fn synth_is_reproducible_and_seed_env_overrides() {
    let dir = small_dir();
    ok(&posegraph(&["synth", "--config", "cfg.json", "--out", "a"], dir.path()));
    ok(&posegraph(&["synth", "--config", "cfg.json", "--out", "b"], dir.path()));
    let read = |p: &str| fs::read(dir.path().join(p)).unwrap();
    assert_eq!(read("a/train/annotations.json"), read("b/train/annotations.json"));
    assert_eq!(read("a/train/images/000003.png"), read("b/train/images/000003.png"));

    let out = Command::new(env!("CARGO_BIN_EXE_posegraph"))
        .args(["synth", "--config", "cfg.json", "--out", "c"])
        .current_dir(dir.path())
        .env("POSEGRAPH_SEED", "9")
        .output()
        .unwrap();
    ok(&out);
    let manifest: Value = serde_json::from_str(&String::from_utf8(read("c/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 9);
    assert_ne!(read("a/train/annotations.json"), read("c/train/annotations.json"));
}

#[test]
fn invalid_output_path_is_named() {
    let dir = small_dir();
    let out = posegraph(&["synth", "--config", "cfg.json", "--out", "cfg.json"], dir.path());
    assert!(!out.status.success());
    assert!(stderr(&out).contains("cfg.json"), "{}", stderr(&out));
}

#[test]
fn bad_config_fails_before_writing() {
    let dir = small_dir();
    fs::write(dir.path().join("bad.json"), r#"{"schema_version": 1, "trian": {}}"#).unwrap();
    let out = posegraph(&["synth", "--config", "bad.json", "--out", "ds"], dir.path());
    assert!(!out.status.success());
    assert!(stderr(&out).contains("trian"), "{}", stderr(&out));
    assert!(!dir.path().join("ds").exists());
}

#[test]
fn missing_annotations_name_the_path() {
    let dir = small_dir();
    fs::create_dir(dir.path().join("empty")).unwrap();
    let out = posegraph(&["train", "--config", "cfg.json", "--data", "empty", "--out", "run"], dir.path());
    assert!(!out.status.success());
    assert!(stderr(&out).contains("annotations.json"), "{}", stderr(&out));
}

fn log_rows(path: &Path) -> Vec<String> {
    fs::read_to_string(path).unwrap().lines().map(str::to_owned).collect()
}

#[test]
fn train_writes_log_and_checkpoints_and_resumes_exactly() {
    let dir = small_dir();
    ok(&posegraph(&["synth", "--config", "cfg.json", "--out", "ds"], dir.path()));
    ok(&posegraph(&["train", "--config", "cfg.json", "--data", "ds", "--out", "full"], dir.path()));
    let full = log_rows(&dir.path().join("full/log.csv"));
    assert_eq!(full[0], "epoch,mean_loss,heatmap_loss,pull,push,lr");
    assert_eq!(full.len(), 4);
    for name in ["checkpoint_epoch001.json", "checkpoint_epoch002.json", "model.json", "model.bin"] {
        assert!(dir.path().join("full").join(name).exists(), "{name}");
    }

    // Resuming after the first epoch continues the schedule at epoch 1.
    fs::create_dir(dir.path().join("resumed")).unwrap();
    let rows: Vec<String> = full[..2].to_vec();
    fs::write(dir.path().join("resumed/log.csv"), rows.join("\n") + "\n").unwrap();
    ok(&posegraph(
        &[
            "train",
            "--config",
            "cfg.json",
            "--data",
            "ds",
            "--out",
            "resumed",
            "--checkpoint",
            "full/checkpoint_epoch001.json",
        ],
        dir.path(),
    ));
    assert_eq!(log_rows(&dir.path().join("resumed/log.csv")), full);
    let (a, ea) = checkpoint::load(&dir.path().join("full/model.json")).unwrap();
    let (b, eb) = checkpoint::load(&dir.path().join("resumed/model.json")).unwrap();
    assert_eq!((ea, eb), (3, 3));
    assert_eq!(a.store, b.store);
}

fn trained(dir: &Path) {
    ok(&posegraph(&["synth", "--config", "cfg.json", "--out", "ds"], dir));
    ok(&posegraph(&["train", "--config", "cfg.json", "--data", "ds", "--out", "run"], dir));
}

#[test]
fn eval_writes_results_and_report() {
    let dir = small_dir();
    trained(dir.path());
    let table = ok(&posegraph(
        &["eval", "--config", "cfg.json", "--checkpoint", "run/model.json", "--data", "ds", "--out", "ev"],
        dir.path(),
    ));
    let header: Vec<&str> = table.lines().next().unwrap().split_whitespace().collect();
    assert_eq!(header, ["AP", "AP50", "AP75", "AP_M", "AP_L", "AR", "AR50", "AR75"]);
    let results: ResultsFile = serde_json::from_str(&fs::read_to_string(dir.path().join("ev/results.json")).unwrap()).unwrap();
    assert_eq!(results.schema_version, 1);
    for r in &results.results {
        assert_eq!(r.keypoints.len(), 15);
        assert!((10..13).contains(&r.image_id));
    }
    let m: MetricsFile = serde_json::from_str(&fs::read_to_string(dir.path().join("ev/metrics.json")).unwrap()).unwrap();
    assert_eq!(m.images, 3);
    assert!(m.report.is_some());

    // Rerunning gives the same bytes; a single unit scale equals no averaging.
    ok(&posegraph(
        &["eval", "--config", "cfg.json", "--checkpoint", "run/model.json", "--data", "ds", "--out", "again"],
        dir.path(),
    ));
    ok(&posegraph(
        &[
            "eval",
            "--config",
            "cfg.json",
            "--checkpoint",
            "run/model.json",
            "--data",
            "ds",
            "--out",
            "unit",
            "--scales",
            "1",
        ],
        dir.path(),
    ));
    let read = |p: &str| fs::read(dir.path().join(p)).unwrap();
    assert_eq!(read("ev/results.json"), read("again/results.json"));
    assert_eq!(read("ev/results.json"), read("unit/results.json"));
}

#[test]
fn empty_eval_set_gives_null_report() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("cfg.json"),
        r#"{"schema_version": 1, "data": {"train_count": 1, "eval_count": 0}}"#,
    )
    .unwrap();
    ok(&posegraph(&["synth", "--config", "cfg.json", "--out", "ds"], dir.path()));
    let cfg = RunConfig::from_json(&fs::read_to_string(dir.path().join("cfg.json")).unwrap()).unwrap();
    checkpoint::save(&PoseNet::new(cfg.model, 0).unwrap(), 0, &dir.path().join("m.json")).unwrap();
    let out = posegraph(
        &["eval", "--config", "cfg.json", "--checkpoint", "m.json", "--data", "ds", "--out", "ev"],
        dir.path(),
    );
    ok(&out);
    assert!(stderr(&out).contains("warning"), "{}", stderr(&out));
    let m: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("ev/metrics.json")).unwrap()).unwrap();
    assert_eq!(m["report"], Value::Null);
    assert_eq!(m["schema_version"], 1);
}

#[test]
fn checkpoint_for_another_model_is_rejected() {
    let dir = small_dir();
    ok(&posegraph(&["synth", "--config", "cfg.json", "--out", "ds"], dir.path()));
    let mut cfg = RunConfig::default();
    cfg.model.base_width = 8;
    checkpoint::save(&PoseNet::new(cfg.model, 0).unwrap(), 0, &dir.path().join("narrow.json")).unwrap();
    let out = posegraph(
        &["eval", "--config", "cfg.json", "--checkpoint", "narrow.json", "--data", "ds", "--out", "ev"],
        dir.path(),
    );
    assert!(!out.status.success());
    assert!(stderr(&out).contains("width 8"), "{}", stderr(&out));
}

/// A model whose heatmap head cannot fire anywhere.
fn silent_model(dir: &Path) {
    let mut model = PoseNet::new(RunConfig::default().model, 0).unwrap();
    for p in model.store.params_mut() {
        if p.name.starts_with("head") && p.name.contains("heat") {
            let bias = p.name.ends_with("bias");
            p.tensor.data_mut().iter_mut().for_each(|v| *v = if bias { -50.0 } else { 0.0 });
        }
    }
    checkpoint::save(&model, 0, &dir.join("silent.json")).unwrap();
}

#[test]
fn infer_on_blank_image_writes_empty_instances_and_refuses_overwrite() {
    let dir = small_dir();
    silent_model(dir.path());
    image::RgbImage::new(64, 64).save(dir.path().join("blank.png")).unwrap();
    let args = [
        "infer",
        "--config",
        "cfg.json",
        "--checkpoint",
        "silent.json",
        "--image",
        "blank.png",
        "--out",
        "ov.png",
    ];
    ok(&posegraph(&args, dir.path()));
    let inst: InstancesFile = serde_json::from_str(&fs::read_to_string(dir.path().join("ov.json")).unwrap()).unwrap();
    assert_eq!(inst.schema_version, 1);
    assert!(inst.instances.is_empty());
    assert_eq!((inst.width, inst.height), (64, 64));
    assert!(dir.path().join("ov.png").exists());

    let again = posegraph(&args, dir.path());
    assert!(!again.status.success());
    assert!(stderr(&again).contains("--force"), "{}", stderr(&again));
    let mut forced = args.to_vec();
    forced.push("--force");
    ok(&posegraph(&forced, dir.path()));
}

#[test]
fn infer_resizes_and_maps_back() {
    let dir = small_dir();
    trained(dir.path());
    let img = image::open(dir.path().join("ds/eval/images/000010.png")).unwrap().to_rgb8();
    image::imageops::resize(&img, 128, 96, image::imageops::FilterType::Nearest)
        .save(dir.path().join("big.png"))
        .unwrap();
    ok(&posegraph(
        &["infer", "--config", "cfg.json", "--checkpoint", "run/model.json", "--image", "big.png", "--out", "o.png"],
        dir.path(),
    ));
    let inst: InstancesFile = serde_json::from_str(&fs::read_to_string(dir.path().join("o.json")).unwrap()).unwrap();
    assert_eq!((inst.width, inst.height), (128, 96));
    let overlay = image::open(dir.path().join("o.png")).unwrap();
    assert_eq!((overlay.width(), overlay.height()), (128, 96));
    for i in &inst.instances {
        for [x, y, _] in i.keypoints.iter().flatten() {
            assert!((0.0..128.0).contains(x) && (0.0..96.0).contains(y), "{x} {y}");
        }
    }
}

#[test]
fn unknown_command_and_missing_flags_fail() {
    let dir = small_dir();
    assert!(!posegraph(&["fly"], dir.path()).status.success());
    let out = posegraph(&["eval", "--config", "cfg.json"], dir.path());
    assert!(!out.status.success());
    assert!(stderr(&out).contains("--checkpoint"), "{}", stderr(&out));
}

fn parse_gradcheck(stdout: &str) -> Vec<(String, String, f64, bool)> {
    stdout
        .lines()
        .filter(|l| l.starts_with("gradcheck "))
        .map(|l| {
            let f: Vec<&str> = l.split_whitespace().collect();
            assert_eq!(f.len(), 6, "{l}");
            let err: f64 = f[3].strip_prefix("max_rel_err=").unwrap().parse().unwrap();
            (f[1].to_owned(), f[2].to_owned(), err, f[5] == "ok")
        })
        .collect()
}

#[test]
fn gradcheck_reports_every_module_and_catches_a_fault() {
    let dir = tempfile::tempdir().unwrap();
    let clean = posegraph(&["gradcheck"], dir.path());
    let lines = parse_gradcheck(&ok(&clean));
    let modules: Vec<&str> = lines.iter().filter(|l| l.0 == "module").map(|l| l.1.as_str()).collect();
    for m in ["se_block", "channel_attention", "spatial_attention", "grm", "mfa", "heads", "network_loss"] {
        assert!(modules.contains(&m), "{m} missing from {modules:?}");
    }
    assert!(lines.iter().any(|l| l.0 == "primitive" && l.1 == "conv2d/weight"));
    assert!(lines.iter().all(|l| l.3 && l.2 < 1e-3));

    let faulty = posegraph(&["gradcheck", "--inject-fault", "1.5"], dir.path());
    assert!(!faulty.status.success());
    let lines = parse_gradcheck(&String::from_utf8_lossy(&faulty.stdout));
    assert!(lines.iter().any(|l| !l.3));
}
