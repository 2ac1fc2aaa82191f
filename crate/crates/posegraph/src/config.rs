//! The single JSON document that configures every command.

use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use posegraph_core::metrics::EvalParams;
use posegraph_core::postprocess::{DecodeConfig, TtaConfig};
use posegraph_core::synth::SceneSpec;
use posegraph_core::trainer::TrainConfig;
use posegraph_core::ModelConfig;
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;
pub const SEED_ENV: &str = "POSEGRAPH_SEED";

/// Split sizes written by `synth`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_count: usize,
    pub eval_count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_count: 200,
            eval_count: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Per-keypoint OKS constants; uniform 0.1 (or the COCO table for 17
    /// keypoints) when absent.
    pub keypoint_constants: Option<Vec<f64>>,
    pub max_detections: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            keypoint_constants: None,
            max_detections: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub scene: SceneSpec,
    pub data: DataConfig,
    pub decode: DecodeConfig,
    pub tta: TtaConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            scene: SceneSpec::default(),
            data: DataConfig::default(),
            decode: DecodeConfig::default(),
            tta: TtaConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Reads and validates `path`, or the defaults when `None`. A set
    /// `POSEGRAPH_SEED` replaces both the scene and the training seed.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                Self::from_json(&text).with_context(|| format!("in config {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        if let Ok(raw) = std::env::var(SEED_ENV) {
            let seed: u64 = raw
                .trim()
                .parse()
                .with_context(|| format!("{SEED_ENV}={raw:?} is not an unsigned integer"))?;
            cfg.scene.seed = seed;
            cfg.train.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).context("parsing config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            bail!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            );
        }
        self.model.validate().context("model")?;
        self.train.validate().context("train")?;
        self.scene.validate().context("scene")?;
        self.decode.validate().context("decode")?;
        ensure!(
            self.scene.width == self.model.input_width && self.scene.height == self.model.input_height,
            "scene size {}x{} differs from model input {}x{}",
            self.scene.width,
            self.scene.height,
            self.model.input_width,
            self.model.input_height
        );
        for &s in &self.tta.scales {
            ensure!(s.is_finite() && s > 0.0, "tta scales must be positive, got {s}");
        }
        if let Some(k) = &self.eval.keypoint_constants {
            ensure!(
                k.len() == self.model.keypoints,
                "eval.keypoint_constants has {} entries for {} keypoints",
                k.len(),
                self.model.keypoints
            );
            ensure!(k.iter().all(|&v| v.is_finite() && v > 0.0), "keypoint constants must be positive");
        }
        ensure!(self.eval.max_detections > 0, "eval.max_detections must be positive");
        Ok(())
    }

    pub fn eval_params(&self) -> EvalParams {
        let mut p = EvalParams::new(self.model.keypoints, self.model.input_width);
        if let Some(k) = &self.eval.keypoint_constants {
            p.constants = k.clone();
        }
        p.max_detections = self.eval.max_detections;
        p
    }

    pub fn tta_enabled(&self) -> bool {
        self.tta.flip || !self.tta.scales.is_empty()
    }
}
