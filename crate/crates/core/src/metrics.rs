//! Object keypoint similarity and COCO-style AP / AR.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::annotation::Annotation;
use crate::error::{Error, Result};
use crate::postprocess::PoseInstance;

/// Per-keypoint falloff constant used for the synthetic skeletons.
pub const DEFAULT_KEYPOINT_CONSTANT: f64 = 0.1;

/// Per-keypoint constants for the 17 COCO keypoints.
pub const COCO_KEYPOINT_CONSTANTS: [f64; 17] = [
    0.026, 0.025, 0.025, 0.035, 0.035, 0.079, 0.079, 0.072, 0.072, 0.062, 0.062, 0.107, 0.107, 0.087,
    0.087, 0.089, 0.089,
];

/// Inputs to one OKS evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct OksRecord {
    /// Pixel distances; infinite for keypoints the prediction lacks.
    pub distances: Vec<f64>,
    pub visibility: Vec<u8>,
    /// Object scale, the square root of the ground-truth area.
    pub scale: f64,
    pub constants: Vec<f64>,
}

/// Mean of `exp(-d^2 / (2 s^2 k^2))` over labeled keypoints.
pub fn oks(record: &OksRecord) -> Result<f64> {
    let n = record.distances.len();
    if record.visibility.len() != n || record.constants.len() != n {
        return Err(Error::shape(
            "oks",
            format!(
                "{} distances, {} flags, {} constants",
                n,
                record.visibility.len(),
                record.constants.len()
            ),
        ));
    }
    let s2 = record.scale * record.scale;
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..n {
        if record.visibility[i] == 0 {
            continue;
        }
        let d = record.distances[i];
        let k = record.constants[i];
        total += libm::exp(-(d * d) / (2.0 * s2 * k * k));
        count += 1;
    }
    if count == 0 {
        return Err(Error::UndefinedOks);
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictedKeypoint {
    pub x: f64,
    pub y: f64,
    pub score: f64,
}

/// One predicted person in one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: u64,
    /// `None` for types the prediction does not contain.
    pub keypoints: Vec<Option<PredictedKeypoint>>,
    pub score: f64,
}

impl Detection {
    pub fn from_instance(image_id: u64, inst: &PoseInstance) -> Self {
        Detection {
            image_id,
            keypoints: inst
                .slots
                .iter()
                .map(|s| {
                    s.as_ref().map(|k| PredictedKeypoint {
                        x: k.x,
                        y: k.y,
                        score: k.score,
                    })
                })
                .collect(),
            score: inst.score(),
        }
    }

    /// Area of the box spanned by the present keypoints.
    pub fn extent_area(&self) -> f64 {
        let pts: Vec<&PredictedKeypoint> = self.keypoints.iter().flatten().collect();
        if pts.is_empty() {
            return 0.0;
        }
        let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in pts {
            x0 = x0.min(p.x);
            x1 = x1.max(p.x);
            y0 = y0.min(p.y);
            y1 = y1.max(p.y);
        }
        (x1 - x0) * (y1 - y0)
    }
}

/// Ground-truth people of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthImage {
    pub image_id: u64,
    pub annotations: Vec<Annotation>,
}

/// OKS between a prediction and a ground-truth person. Keypoint types the
/// prediction lacks contribute a zero term.
pub fn detection_oks(det: &Detection, gt: &Annotation, constants: &[f64]) -> Result<f64> {
    let k = gt.keypoints.len();
    if constants.len() < k {
        return Err(Error::config(format!(
            "{} keypoint constants for {k} keypoints",
            constants.len()
        )));
    }
    let distances = gt
        .keypoints
        .iter()
        .enumerate()
        .map(|(i, g)| match det.keypoints.get(i).copied().flatten() {
            Some(p) => libm::hypot(p.x - g.x, p.y - g.y),
            None => f64::INFINITY,
        })
        .collect();
    oks(&OksRecord {
        distances,
        visibility: gt.keypoints.iter().map(|g| g.v).collect(),
        scale: libm::sqrt(gt.area.max(f64::EPSILON)),
        constants: constants[..k].to_vec(),
    })
}

/// Greedy matching of predictions (already in descending score order) to
/// ground truths. `oks[p][g]` is the similarity of prediction `p` and truth
/// `g`; `ignored[g]` marks truths outside the evaluated subset, which are
/// only used when no regular truth qualifies. Returns per prediction the
/// matched truth index.
pub fn match_instances(oks: &[Vec<f64>], ignored: &[bool], threshold: f64) -> Vec<Option<usize>> {
    let mut taken = vec![false; ignored.len()];
    let mut out = Vec::with_capacity(oks.len());
    for row in oks {
        let mut best: Option<(usize, f64)> = None;
        for pass_ignored in [false, true] {
            for (g, &o) in row.iter().enumerate() {
                if taken[g] || ignored[g] != pass_ignored || o < threshold {
                    continue;
                }
                if best.map_or(true, |(_, b)| o > b) {
                    best = Some((g, o));
                }
            }
            if best.is_some() {
                break;
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
        }
        out.push(best.map(|(g, _)| g));
    }
    out
}

/// Object-area band in square pixels, lower bound inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AreaRange {
    pub min: f64,
    pub max: f64,
}

impl AreaRange {
    pub const ALL: AreaRange = AreaRange {
        min: 0.0,
        max: f64::INFINITY,
    };

    pub fn contains(&self, area: f64) -> bool {
        area >= self.min && area < self.max
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalParams {
    pub constants: Vec<f64>,
    pub thresholds: Vec<f64>,
    pub medium: AreaRange,
    pub large: AreaRange,
    /// Highest-scoring detections kept per image.
    pub max_detections: usize,
}

impl EvalParams {
    /// Uniform constants for `keypoints` types, thresholds 0.50:0.05:0.95,
    /// and the benchmark's medium (32^2..96^2) and large (> 96^2) bands
    /// scaled from 512-pixel inputs to `input_width`.
    pub fn new(keypoints: usize, input_width: usize) -> Self {
        let f = (input_width as f64 / 512.0) * (input_width as f64 / 512.0);
        EvalParams {
            constants: if keypoints == 17 {
                COCO_KEYPOINT_CONSTANTS.to_vec()
            } else {
                vec![DEFAULT_KEYPOINT_CONSTANT; keypoints]
            },
            thresholds: (0..10).map(|i| 0.5 + 0.05 * i as f64).collect(),
            medium: AreaRange {
                min: 32.0 * 32.0 * f,
                max: 96.0 * 96.0 * f,
            },
            large: AreaRange {
                min: 96.0 * 96.0 * f,
                max: f64::INFINITY,
            },
            max_detections: 20,
        }
    }
}

/// All values are `None` when the subset has no ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(rename = "AP")]
    pub ap: Option<f64>,
    #[serde(rename = "AP50")]
    pub ap50: Option<f64>,
    #[serde(rename = "AP75")]
    pub ap75: Option<f64>,
    #[serde(rename = "AP_M")]
    pub ap_m: Option<f64>,
    #[serde(rename = "AP_L")]
    pub ap_l: Option<f64>,
    #[serde(rename = "AR")]
    pub ar: Option<f64>,
    #[serde(rename = "AR50")]
    pub ar50: Option<f64>,
    #[serde(rename = "AR75")]
    pub ar75: Option<f64>,
}

impl MetricReport {
    /// `(label, value)` pairs in report column order.
    pub fn columns(&self) -> [(&'static str, Option<f64>); 8] {
        [
            ("AP", self.ap),
            ("AP50", self.ap50),
            ("AP75", self.ap75),
            ("AP_M", self.ap_m),
            ("AP_L", self.ap_l),
            ("AR", self.ar),
            ("AR50", self.ar50),
            ("AR75", self.ar75),
        ]
    }
}

/// Precision and recall of one threshold and area band.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdResult {
    pub ap: Option<f64>,
    pub recall: Option<f64>,
}

/// 101-point interpolated precision: at each recall level `r / 100`, the
/// highest precision reached at any recall at least that large.
pub fn interpolated_ap(tp_flags: &[bool], positives: usize) -> Option<f64> {
    if positives == 0 {
        return None;
    }
    let mut precision = Vec::with_capacity(tp_flags.len());
    let mut recall = Vec::with_capacity(tp_flags.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &t in tp_flags {
        if t {
            tp += 1;
        } else {
            fp += 1;
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(tp as f64 / positives as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        if precision[i + 1] > precision[i] {
            precision[i] = precision[i + 1];
        }
    }
    let mut sum = 0.0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        let idx = recall.partition_point(|&x| x < level);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    Some(sum / 101.0)
}

struct ImageEval {
    /// Detections of this image, best first, as (score, order, area).
    dets: Vec<(f64, usize, f64)>,
    oks: Vec<Vec<f64>>,
    gt_area: Vec<f64>,
    gt_valid: Vec<bool>,
}

/// AP and final recall at every threshold for one area band.
pub fn evaluate_band(
    detections: &[Detection],
    truths: &[GroundTruthImage],
    params: &EvalParams,
    band: AreaRange,
) -> Result<Vec<ThresholdResult>> {
    let images = prepare(detections, truths, params)?;
    Ok(params
        .thresholds
        .iter()
        .map(|&t| band_at(&images, band, t))
        .collect())
}

fn prepare(detections: &[Detection], truths: &[GroundTruthImage], params: &EvalParams) -> Result<Vec<ImageEval>> {
    let mut out = Vec::with_capacity(truths.len());
    for img in truths {
        let mut dets: Vec<(usize, &Detection)> = detections
            .iter()
            .enumerate()
            .filter(|(_, d)| d.image_id == img.image_id)
            .collect();
        // stable: equal scores keep input order
        dets.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
        dets.truncate(params.max_detections);
        let gt_valid: Vec<bool> = img.annotations.iter().map(|a| a.labeled_count() > 0).collect();
        let mut oks_rows = Vec::with_capacity(dets.len());
        for (_, d) in &dets {
            let mut row = Vec::with_capacity(img.annotations.len());
            for (g, a) in img.annotations.iter().enumerate() {
                row.push(if gt_valid[g] {
                    detection_oks(d, a, &params.constants)?
                } else {
                    f64::NEG_INFINITY
                });
            }
            oks_rows.push(row);
        }
        out.push(ImageEval {
            dets: dets.iter().map(|(i, d)| (d.score, *i, d.extent_area())).collect(),
            oks: oks_rows,
            gt_area: img.annotations.iter().map(|a| a.area).collect(),
            gt_valid,
        });
    }
    Ok(out)
}

fn band_at(images: &[ImageEval], band: AreaRange, threshold: f64) -> ThresholdResult {
    let mut scored: Vec<(f64, usize, bool)> = Vec::new();
    let mut positives = 0usize;
    let mut hits = 0usize;
    for img in images {
        // truths without labels take no part; truths outside the band may
        // absorb a detection without counting either way
        let ignored: Vec<bool> = img
            .gt_area
            .iter()
            .zip(&img.gt_valid)
            .map(|(&a, &v)| !v || !band.contains(a))
            .collect();
        positives += ignored.iter().filter(|&&i| !i).count();
        let matches = match_instances(&img.oks, &ignored, threshold);
        for (m, &(score, order, area)) in matches.iter().zip(&img.dets) {
            match m {
                Some(g) if !ignored[*g] => {
                    hits += 1;
                    scored.push((score, order, true));
                }
                Some(_) => {}
                None if !band.contains(area) => {}
                None => scored.push((score, order, false)),
            }
        }
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let flags: Vec<bool> = scored.iter().map(|s| s.2).collect();
    ThresholdResult {
        ap: interpolated_ap(&flags, positives),
        recall: (positives > 0).then(|| hits as f64 / positives as f64),
    }
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = values.collect();
    let v = v?;
    if v.is_empty() {
        return None;
    }
    Some(v.iter().sum::<f64>() / v.len() as f64)
}

fn at_threshold(params: &EvalParams, results: &[ThresholdResult], t: f64, pick: fn(&ThresholdResult) -> Option<f64>) -> Option<f64> {
    params
        .thresholds
        .iter()
        .position(|&x| (x - t).abs() < 1e-9)
        .and_then(|i| pick(&results[i]))
}

/// Full report over all thresholds and the medium / large bands.
pub fn evaluate(detections: &[Detection], truths: &[GroundTruthImage], params: &EvalParams) -> Result<MetricReport> {
    if params.thresholds.is_empty() {
        return Err(Error::config("no OKS thresholds"));
    }
    let images = prepare(detections, truths, params)?;
    let run = |band: AreaRange| -> Vec<ThresholdResult> {
        params.thresholds.iter().map(|&t| band_at(&images, band, t)).collect()
    };
    let all = run(AreaRange::ALL);
    let medium = run(params.medium);
    let large = run(params.large);
    Ok(MetricReport {
        ap: mean(all.iter().map(|r| r.ap)),
        ap50: at_threshold(params, &all, 0.5, |r| r.ap),
        ap75: at_threshold(params, &all, 0.75, |r| r.ap),
        ap_m: mean(medium.iter().map(|r| r.ap)),
        ap_l: mean(large.iter().map(|r| r.ap)),
        ar: mean(all.iter().map(|r| r.recall)),
        ar50: at_threshold(params, &all, 0.5, |r| r.recall),
        ar75: at_threshold(params, &all, 0.75, |r| r.recall),
    })
}
