//! Argument parsing and the five commands.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Parser, ValueEnum};
use posegraph_core::annotation::Annotation;
use posegraph_core::gradcheck::{self, CheckKind, CheckResult};
use posegraph_core::metrics::{self, Detection, MetricReport};
use posegraph_core::postprocess::{self, FlipPairs, PoseInstance};
use posegraph_core::synth::{self, generate_scene, KEYPOINTS, KEYPOINT_NAMES};
use posegraph_core::trainer::{self, EpochRecord, TrainEvent, TrainSample};
use posegraph_core::{PoseNet, Tensor};
use serde::Serialize;

use crate::checkpoint;
use crate::coco::{self, CocoCategory, CocoDataset, CocoImage, DatasetDir, ResultsFile, ANNOTATIONS_FILE, IMAGES_DIR};
use crate::config::{RunConfig, SCHEMA_VERSION};
use crate::imageio;
use crate::overlay;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Command {
    /// Render a synthetic dataset.
    Synth,
    /// Train a model on a dataset.
    Train,
    /// Evaluate a checkpoint on a dataset.
    Eval,
    /// Detect poses in one image and draw them.
    Infer,
    /// Compare analytic gradients with finite differences.
    Gradcheck,
}

#[derive(Debug, Parser)]
#[command(name = "posegraph", version, about = "Bottom-up multi-person pose estimation")]
pub struct Cli {
    pub command: Command,
    /// Run configuration (JSON); defaults apply when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Model checkpoint manifest; `train` resumes from it.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Dataset directory, or a `synth` output holding `train/` and `eval/`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory (`synth`, `train`, `eval`) or overlay PNG (`infer`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Input image for `infer`.
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Average heatmaps with those of the mirrored image.
    #[arg(long)]
    pub flip: bool,
    /// Test scales to average, e.g. `0.5,1,2`.
    #[arg(long, value_delimiter = ',')]
    pub scales: Option<Vec<f64>>,
    /// Overwrite existing `infer` outputs.
    #[arg(long)]
    pub force: bool,
    /// Scale the convolution weight gradient by this factor (negative
    /// control for `gradcheck`).
    #[arg(long, hide = true)]
    pub inject_fault: Option<f64>,
}

/// Parses nothing from the environment except `POSEGRAPH_SEED`.
pub fn run(cli: &Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if cli.flip {
        cfg.tta.flip = true;
    }
    if let Some(s) = &cli.scales {
        cfg.tta.scales = s.clone();
    }
    cfg.validate()?;
    match cli.command {
        Command::Synth => synth(&cfg, required(&cli.out, "--out")?),
        Command::Train => train(
            &cfg,
            required(&cli.data, "--data")?,
            required(&cli.out, "--out")?,
            cli.checkpoint.as_deref(),
        ),
        Command::Eval => eval(
            &cfg,
            required(&cli.checkpoint, "--checkpoint")?,
            required(&cli.data, "--data")?,
            required(&cli.out, "--out")?,
        ),
        Command::Infer => infer(
            &cfg,
            required(&cli.checkpoint, "--checkpoint")?,
            required(&cli.image, "--image")?,
            required(&cli.out, "--out")?,
            cli.force,
        ),
        Command::Gradcheck => {
            if gradcheck(cli.inject_fault)? {
                Ok(())
            } else {
                bail!("gradient check failed")
            }
        }
    }
}

fn required<'a>(v: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    v.as_deref().with_context(|| format!("{flag} is required for this command"))
}

pub fn flip_pairs_for(keypoints: usize) -> Result<FlipPairs> {
    Ok(match keypoints {
        KEYPOINTS => synth::flip_pairs(),
        17 => FlipPairs::new(
            vec![(1, 2), (3, 4), (5, 6), (7, 8), (9, 10), (11, 12), (13, 14), (15, 16)],
            17,
        )?,
        _ => FlipPairs::empty(),
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating directory {}", path.display()))
}

#[derive(Serialize)]
struct SynthManifest {
    schema_version: u32,
    seed: u64,
    width: usize,
    height: usize,
    keypoints: usize,
    train_count: usize,
    eval_count: usize,
}

pub const TRAIN_SPLIT: &str = "train";
pub const EVAL_SPLIT: &str = "eval";
pub const MANIFEST_FILE: &str = "manifest.json";

fn person_category() -> CocoCategory {
    CocoCategory {
        id: coco::PERSON_CATEGORY,
        name: "person".into(),
        keypoints: KEYPOINT_NAMES.iter().map(|s| s.to_string()).collect(),
        skeleton: overlay::skeleton(KEYPOINTS).iter().map(|&(a, b)| [a + 1, b + 1]).collect(),
    }
}

/// Writes `out/train` and `out/eval`. Eval scenes continue the index
/// sequence after the training scenes, so the splits never share a scene.
pub fn synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    ensure!(
        cfg.model.keypoints == KEYPOINTS,
        "synthetic scenes have {KEYPOINTS} keypoints, the model expects {}",
        cfg.model.keypoints
    );
    create_dir(out)?;
    let splits = [
        (TRAIN_SPLIT, 0, cfg.data.train_count),
        (EVAL_SPLIT, cfg.data.train_count, cfg.data.eval_count),
    ];
    for (name, first, count) in splits {
        let dir = out.join(name);
        create_dir(&dir.join(IMAGES_DIR))?;
        let mut ds = CocoDataset {
            schema_version: SCHEMA_VERSION,
            images: Vec::with_capacity(count),
            annotations: Vec::new(),
            categories: vec![person_category()],
        };
        for index in first..first + count {
            let scene = generate_scene(&cfg.scene, index as u64)?;
            let file_name = format!("{index:06}.png");
            imageio::save_png(&imageio::to_rgb(&scene.image)?, &dir.join(IMAGES_DIR).join(&file_name))?;
            let image_id = index as u64;
            ds.images.push(CocoImage {
                id: image_id,
                file_name,
                width: cfg.scene.width,
                height: cfg.scene.height,
            });
            for ann in &scene.annotations {
                let id = ds.annotations.len() as u64 + 1;
                ds.annotations.push(coco::from_annotation(id, image_id, ann));
            }
        }
        let path = dir.join(ANNOTATIONS_FILE);
        fs::write(&path, ds.to_json()? + "\n").with_context(|| format!("writing {}", path.display()))?;
        eprintln!("{name}: {count} images, {} people", ds.annotations.len());
    }
    write_json(
        &out.join(MANIFEST_FILE),
        &SynthManifest {
            schema_version: SCHEMA_VERSION,
            seed: cfg.scene.seed,
            width: cfg.scene.width,
            height: cfg.scene.height,
            keypoints: KEYPOINTS,
            train_count: cfg.data.train_count,
            eval_count: cfg.data.eval_count,
        },
    )
}

/// `dir` itself when it holds an annotations file, else `dir/split`.
pub fn resolve_split(dir: &Path, split: &str) -> PathBuf {
    if !dir.join(ANNOTATIONS_FILE).exists() && dir.join(split).join(ANNOTATIONS_FILE).exists() {
        dir.join(split)
    } else {
        dir.to_path_buf()
    }
}

/// One dataset image resized to the network input.
pub struct LoadedImage {
    pub image_id: u64,
    pub tensor: Tensor,
    /// Network-to-original scale factors.
    pub sx: f64,
    pub sy: f64,
    /// Ground truth in network coordinates.
    pub annotations: Vec<Annotation>,
}

fn scale_annotation(a: &Annotation, sx: f64, sy: f64) -> Annotation {
    let mut a = a.clone();
    if sx == 1.0 && sy == 1.0 {
        return a;
    }
    for k in &mut a.keypoints {
        if k.is_labeled() {
            k.x /= sx;
            k.y /= sy;
        }
    }
    a.bbox = [a.bbox[0] / sx, a.bbox[1] / sy, a.bbox[2] / sx, a.bbox[3] / sy];
    a.area /= sx * sy;
    a
}

pub fn load_images(ds: &DatasetDir, cfg: &RunConfig) -> Result<Vec<LoadedImage>> {
    let k = ds.coco.keypoint_count()?;
    ensure!(
        k == cfg.model.keypoints,
        "{}: dataset has {k} keypoints, the model expects {}",
        ds.root.display(),
        cfg.model.keypoints
    );
    ds.coco
        .images
        .iter()
        .map(|im| {
            let rgb = imageio::load_rgb(&ds.image_path(im))?;
            let (tensor, sx, sy) = imageio::fit(&rgb, cfg.model.input_width, cfg.model.input_height);
            let annotations = ds
                .coco
                .annotations_for(im.id)?
                .iter()
                .map(|a| scale_annotation(a, sx, sy))
                .collect();
            Ok(LoadedImage {
                image_id: im.id,
                tensor,
                sx,
                sy,
                annotations,
            })
        })
        .collect()
}

fn load_model(cfg: &RunConfig, path: &Path) -> Result<(PoseNet, usize)> {
    let (model, epochs) = checkpoint::load(path)?;
    ensure!(
        model.config == cfg.model,
        "checkpoint {} was built for a different model (input {}x{}, width {}) than the config (input {}x{}, width {})",
        path.display(),
        model.config.input_width,
        model.config.input_height,
        model.config.base_width,
        cfg.model.input_width,
        cfg.model.input_height,
        cfg.model.base_width
    );
    Ok((model, epochs))
}

pub const LOG_FILE: &str = "log.csv";
pub const FINAL_CHECKPOINT: &str = "model.json";

pub fn checkpoint_name(epochs_completed: usize) -> String {
    format!("checkpoint_epoch{epochs_completed:03}.json")
}

pub fn train(cfg: &RunConfig, data: &Path, out: &Path, resume: Option<&Path>) -> Result<()> {
    let ds = DatasetDir::open(&resolve_split(data, TRAIN_SPLIT))?;
    let samples: Vec<TrainSample> = load_images(&ds, cfg)?
        .into_iter()
        .map(|l| TrainSample {
            image: l.tensor,
            annotations: l.annotations,
        })
        .collect();
    ensure!(!samples.is_empty(), "{}: training set is empty", ds.root.display());
    let (mut model, start) = match resume {
        Some(p) => load_model(cfg, p)?,
        None => (PoseNet::new(cfg.model.clone(), cfg.train.seed)?, 0),
    };
    ensure!(
        start < cfg.train.epochs,
        "checkpoint already completed {start} of {} epochs",
        cfg.train.epochs
    );
    create_dir(out)?;
    let log_path = out.join(LOG_FILE);
    let append = resume.is_some() && log_path.exists();
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))?;
    let mut log = csv::WriterBuilder::new().has_headers(!append).from_writer(file);
    let pairs = flip_pairs_for(cfg.model.keypoints)?;
    eprintln!(
        "training {} parameters on {} images, epochs {start}..{}",
        model.param_count(),
        samples.len(),
        cfg.train.epochs
    );
    let mut on_event = |ev: TrainEvent<'_>| -> posegraph_core::Result<()> {
        let io = |e: &dyn std::fmt::Display| posegraph_core::Error::Callback(e.to_string());
        match ev {
            TrainEvent::Epoch(r) => {
                log_epoch(&mut log, r).map_err(|e| io(&format!("{}: {e:#}", log_path.display())))?;
                eprintln!(
                    "epoch {:>3}  loss {:.5}  heatmap {:.5}  pull {:.4}  push {:.4}  lr {:e}",
                    r.epoch, r.mean_loss, r.heatmap_loss, r.pull, r.push, r.lr
                );
            }
            TrainEvent::Checkpoint { epoch, model } => {
                let done = epoch + 1;
                let name = if done == cfg.train.epochs {
                    FINAL_CHECKPOINT.to_string()
                } else {
                    checkpoint_name(done)
                };
                checkpoint::save(model, done, &out.join(&name)).map_err(|e| io(&format!("{e:#}")))?;
            }
        }
        Ok(())
    };
    trainer::train(&mut model, &samples, &cfg.train, &pairs, start, &mut on_event)?;
    eprintln!("wrote {}", out.join(FINAL_CHECKPOINT).display());
    Ok(())
}

fn log_epoch<W: std::io::Write>(log: &mut csv::Writer<W>, r: &EpochRecord) -> Result<()> {
    log.serialize(r)?;
    log.flush()?;
    Ok(())
}

/// Runs the network with the configured test-time averaging and decodes
/// people in network coordinates.
pub fn detect(model: &PoseNet, image: &Tensor, cfg: &RunConfig, pairs: &FlipPairs) -> Result<Vec<PoseInstance>> {
    let (hm, tags) = if cfg.tta_enabled() {
        postprocess::predict_tta(model, image, &cfg.tta, pairs)?
    } else {
        let p = model.predict(image)?;
        (p.heatmaps.batch_item(0)?, p.tags.batch_item(0)?)
    };
    Ok(postprocess::decode(&hm, &tags, model.config.heatmap_stride, &cfg.decode)?)
}

fn to_original(mut inst: PoseInstance, sx: f64, sy: f64) -> PoseInstance {
    for k in inst.slots.iter_mut().flatten() {
        k.x *= sx;
        k.y *= sy;
    }
    inst
}

pub const RESULTS_FILE: &str = "results.json";
pub const METRICS_FILE: &str = "metrics.json";

#[derive(Debug, Serialize, serde::Deserialize)]
pub struct MetricsFile {
    pub schema_version: u32,
    pub images: usize,
    pub detections: usize,
    /// `None` when the set has no images.
    pub report: Option<MetricReport>,
}

pub fn eval(cfg: &RunConfig, ckpt: &Path, data: &Path, out: &Path) -> Result<()> {
    let (model, _) = load_model(cfg, ckpt)?;
    let ds = DatasetDir::open(&resolve_split(data, EVAL_SPLIT))?;
    let images = load_images(&ds, cfg)?;
    let pairs = flip_pairs_for(cfg.model.keypoints)?;
    let mut detections = Vec::new();
    for im in &images {
        for inst in detect(&model, &im.tensor, cfg, &pairs)? {
            detections.push(Detection::from_instance(im.image_id, &to_original(inst, im.sx, im.sy)));
        }
    }
    let report = if images.is_empty() {
        eprintln!("warning: {} has no images; the report is empty", ds.root.display());
        None
    } else {
        Some(metrics::evaluate(&detections, &ds.coco.ground_truth()?, &cfg.eval_params())?)
    };
    create_dir(out)?;
    write_json(&out.join(RESULTS_FILE), &ResultsFile::new(&detections))?;
    write_json(
        &out.join(METRICS_FILE),
        &MetricsFile {
            schema_version: SCHEMA_VERSION,
            images: images.len(),
            detections: detections.len(),
            report,
        },
    )?;
    println!("{}", report_table(report.as_ref()));
    Ok(())
}

/// Two-line table: column labels, then values (or `-` when undefined).
pub fn report_table(report: Option<&MetricReport>) -> String {
    let cols = report.copied().unwrap_or_default().columns();
    let head: Vec<String> = cols.iter().map(|(l, _)| format!("{l:>7}")).collect();
    let vals: Vec<String> = cols
        .iter()
        .map(|(_, v)| match v {
            Some(v) => format!("{v:>7.4}"),
            None => format!("{:>7}", "-"),
        })
        .collect();
    format!("{}\n{}", head.join(" "), vals.join(" "))
}

#[derive(Debug, Serialize, serde::Deserialize)]
pub struct InstancesFile {
    pub schema_version: u32,
    pub image: String,
    pub width: u32,
    pub height: u32,
    pub instances: Vec<InstanceRecord>,
}

#[derive(Debug, Serialize, serde::Deserialize)]
pub struct InstanceRecord {
    pub score: f64,
    /// `[x, y, score]` per keypoint type, `null` where missing.
    pub keypoints: Vec<Option<[f64; 3]>>,
}

/// Path of the instances document written beside an overlay.
pub fn instances_path(overlay: &Path) -> PathBuf {
    overlay.with_extension("json")
}

pub fn infer(cfg: &RunConfig, ckpt: &Path, image: &Path, out: &Path, force: bool) -> Result<()> {
    let json_path = instances_path(out);
    if !force {
        for p in [out, json_path.as_path()] {
            ensure!(!p.exists(), "{} exists; pass --force to overwrite", p.display());
        }
    }
    let (model, _) = load_model(cfg, ckpt)?;
    let mut rgb = imageio::load_rgb(image)?;
    let (tensor, sx, sy) = imageio::fit(&rgb, cfg.model.input_width, cfg.model.input_height);
    let pairs = flip_pairs_for(cfg.model.keypoints)?;
    let instances: Vec<PoseInstance> = detect(&model, &tensor, cfg, &pairs)?
        .into_iter()
        .map(|i| to_original(i, sx, sy))
        .collect();
    overlay::draw_instances(&mut rgb, &instances);
    imageio::save_png(&rgb, out)?;
    write_json(
        &json_path,
        &InstancesFile {
            schema_version: SCHEMA_VERSION,
            image: image.display().to_string(),
            width: rgb.width(),
            height: rgb.height(),
            instances: instances
                .iter()
                .map(|i| InstanceRecord {
                    score: i.score(),
                    keypoints: i.slots.iter().map(|s| s.as_ref().map(|k| [k.x, k.y, k.score])).collect(),
                })
                .collect(),
        },
    )?;
    eprintln!("{} people; wrote {} and {}", instances.len(), out.display(), json_path.display());
    Ok(())
}

/// Seed of the gradient probes. Fixed rather than taken from the config:
/// the probes are a property of the code, not of a run.
pub const GRADCHECK_SEED: u64 = 0;

/// One line per check: `gradcheck <kind> <name> max_rel_err=<e> tol=<t> <ok|FAIL>`.
pub fn format_check(r: &CheckResult) -> String {
    let kind = match r.kind {
        CheckKind::Primitive => "primitive",
        CheckKind::Module => "module",
    };
    format!(
        "gradcheck {kind} {} max_rel_err={:.3e} tol={:.0e} {}",
        r.name,
        r.max_rel_error,
        r.kind.tolerance(),
        if r.passed() { "ok" } else { "FAIL" }
    )
}

/// Prints every check and returns whether all passed.
pub fn gradcheck(fault: Option<f64>) -> Result<bool> {
    let mut all = gradcheck::primitive_checks(GRADCHECK_SEED)?;
    all.extend(gradcheck::module_checks(GRADCHECK_SEED, fault)?);
    let mut ok = true;
    let mut stdout = std::io::stdout().lock();
    for r in &all {
        writeln!(stdout, "{}", format_check(r))?;
        if !r.passed() {
            ok = false;
            if !r.worst.is_empty() {
                writeln!(stdout, "#   worst: {}", r.worst)?;
            }
        }
    }
    Ok(ok)
}
