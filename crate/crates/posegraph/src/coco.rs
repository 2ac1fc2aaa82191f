//! COCO-keypoints annotation and result files (single "person" category).

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use posegraph_core::annotation::{Annotation, Keypoint};
use posegraph_core::metrics::{Detection, GroundTruthImage};
use serde::{Deserialize, Serialize};

use crate::config::SCHEMA_VERSION;

pub const PERSON_CATEGORY: u64 = 1;

fn schema_version() -> u32 {
    SCHEMA_VERSION
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    /// `[x, y, v]` per keypoint.
    pub keypoints: Vec<f64>,
    pub num_keypoints: usize,
    pub area: f64,
    pub bbox: [f64; 4],
    #[serde(default)]
    pub iscrowd: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
    pub keypoints: Vec<String>,
    /// 1-based keypoint index pairs.
    #[serde(default)]
    pub skeleton: Vec<[usize; 2]>,
}

/// An annotations file. Files without `schema_version` (plain COCO
/// exports) are accepted; unknown top-level keys are ignored for the same
/// reason.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoDataset {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

impl CocoDataset {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading annotations {}", path.display()))?;
        let ds: CocoDataset =
            serde_json::from_str(&text).with_context(|| format!("parsing annotations {}", path.display()))?;
        ensure!(
            ds.schema_version == SCHEMA_VERSION,
            "{}: unsupported schema_version {}",
            path.display(),
            ds.schema_version
        );
        Ok(ds)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Keypoint count declared by the person category.
    pub fn keypoint_count(&self) -> Result<usize> {
        match self.categories.iter().find(|c| c.id == PERSON_CATEGORY) {
            Some(c) => Ok(c.keypoints.len()),
            None => bail!("no person category (id {PERSON_CATEGORY})"),
        }
    }

    /// Person annotations of `image_id`, in file order. Crowd regions are
    /// skipped.
    pub fn annotations_for(&self, image_id: u64) -> Result<Vec<Annotation>> {
        self.annotations
            .iter()
            .filter(|a| a.image_id == image_id && a.category_id == PERSON_CATEGORY && a.iscrowd == 0)
            .map(to_annotation)
            .collect()
    }

    pub fn ground_truth(&self) -> Result<Vec<GroundTruthImage>> {
        self.images
            .iter()
            .map(|im| {
                Ok(GroundTruthImage {
                    image_id: im.id,
                    annotations: self.annotations_for(im.id)?,
                })
            })
            .collect()
    }
}

pub fn to_annotation(a: &CocoAnnotation) -> Result<Annotation> {
    ensure!(
        a.keypoints.len() % 3 == 0,
        "annotation {}: keypoints length {} is not a multiple of 3",
        a.id,
        a.keypoints.len()
    );
    let keypoints = a
        .keypoints
        .chunks(3)
        .map(|c| {
            let v = c[2];
            ensure!(v == 0.0 || v == 1.0 || v == 2.0, "annotation {}: visibility {v}", a.id);
            Ok(Keypoint::new(c[0], c[1], v as u8))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Annotation {
        keypoints,
        bbox: a.bbox,
        area: a.area,
    })
}

pub fn from_annotation(id: u64, image_id: u64, ann: &Annotation) -> CocoAnnotation {
    CocoAnnotation {
        id,
        image_id,
        category_id: PERSON_CATEGORY,
        keypoints: ann
            .keypoints
            .iter()
            .flat_map(|k| [k.x, k.y, f64::from(k.v)])
            .collect(),
        num_keypoints: ann.keypoints.iter().filter(|k| k.is_labeled()).count(),
        area: ann.area,
        bbox: ann.bbox,
        iscrowd: 0,
    }
}

/// One detected person in results form; missing keypoints are `0, 0, 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoResult {
    pub image_id: u64,
    pub category_id: u64,
    pub keypoints: Vec<f64>,
    pub score: f64,
}

impl CocoResult {
    pub fn from_detection(d: &Detection) -> Self {
        CocoResult {
            image_id: d.image_id,
            category_id: PERSON_CATEGORY,
            keypoints: d
                .keypoints
                .iter()
                .flat_map(|k| match k {
                    Some(p) => [p.x, p.y, p.score],
                    None => [0.0, 0.0, 0.0],
                })
                .collect(),
            score: d.score,
        }
    }
}

/// Results document: the COCO results array under a versioned wrapper.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultsFile {
    pub schema_version: u32,
    pub results: Vec<CocoResult>,
}

impl ResultsFile {
    pub fn new(detections: &[Detection]) -> Self {
        ResultsFile {
            schema_version: SCHEMA_VERSION,
            results: detections.iter().map(CocoResult::from_detection).collect(),
        }
    }
}

/// A dataset directory: `annotations.json` plus the images it names,
/// relative to `images/`.
#[derive(Debug, Clone)]
pub struct DatasetDir {
    pub root: PathBuf,
    pub coco: CocoDataset,
}

pub const ANNOTATIONS_FILE: &str = "annotations.json";
pub const IMAGES_DIR: &str = "images";

impl DatasetDir {
    pub fn open(root: &Path) -> Result<Self> {
        ensure!(root.is_dir(), "dataset directory {} does not exist", root.display());
        let coco = CocoDataset::read(&root.join(ANNOTATIONS_FILE))?;
        Ok(DatasetDir {
            root: root.to_path_buf(),
            coco,
        })
    }

    pub fn image_path(&self, image: &CocoImage) -> PathBuf {
        self.root.join(IMAGES_DIR).join(&image.file_name)
    }
}
