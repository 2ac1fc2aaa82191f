//! Brute-force oracles shared by the metric, decoding and acceptance tests.
#![allow(dead_code)]

use posegraph_core::annotation::{Annotation, Keypoint};
use posegraph_core::loss::{encode_targets, grid_cell, DEFAULT_SIGMA};
use posegraph_core::metrics::{Detection, GroundTruthImage, PredictedKeypoint};
use posegraph_core::postprocess::PoseInstance;
use posegraph_core::synth::{generate_scene, Scene, SceneSpec, KEYPOINTS};
use posegraph_core::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn person(x: f64, y: f64, size: f64) -> Annotation {
    let pts = [(0.0, -0.5), (-0.4, 0.0), (0.4, 0.0), (-0.2, 0.5), (0.2, 0.5)];
    Annotation::from_keypoints(pts.iter().map(|(dx, dy)| Keypoint::new(x + dx * size, y + dy * size, 2)).collect(), 0.0)
}

pub fn detection(image_id: u64, a: &Annotation, shift: f64, score: f64) -> Detection {
    Detection {
        image_id,
        keypoints: a
            .keypoints
            .iter()
            .map(|k| {
                Some(PredictedKeypoint {
                    x: k.x + shift,
                    y: k.y,
                    score,
                })
            })
            .collect(),
        score,
    }
}

pub fn oracle_oks(det: &Detection, gt: &Annotation, k: f64) -> f64 {
    let s2 = gt.area;
    let mut sum = 0.0;
    let mut n = 0.0;
    for (i, g) in gt.keypoints.iter().enumerate() {
        if g.v == 0 {
            continue;
        }
        n += 1.0;
        if let Some(p) = det.keypoints[i] {
            let d2 = (p.x - g.x).powi(2) + (p.y - g.y).powi(2);
            sum += (-d2 / (2.0 * s2 * k * k)).exp();
        }
    }
    sum / n
}

/// Every partial injective assignment of predictions (in score order) to
/// truths, as `assign[p] = Some(g)`.
pub fn all_assignments(preds: usize, truths: usize) -> Vec<Vec<Option<usize>>> {
    let mut out = vec![vec![]];
    for _ in 0..preds {
        let mut next = Vec::new();
        for a in &out {
            next.push([a.clone(), vec![None]].concat());
            for g in 0..truths {
                if !a.contains(&Some(g)) {
                    next.push([a.clone(), vec![Some(g)]].concat());
                }
            }
        }
        out = next;
    }
    out
}

/// The greedy outcome among all assignments: every match clears the
/// threshold, and no prediction could have taken a better truth still free
/// when its turn came, nor stayed unmatched while one qualified.
pub fn greedy_among_all(oks: &[Vec<f64>], threshold: f64) -> Vec<Option<usize>> {
    let truths = oks.first().map_or(0, |r| r.len());
    let candidates: Vec<Vec<Option<usize>>> = all_assignments(oks.len(), truths)
        .into_iter()
        .filter(|a| {
            a.iter().enumerate().all(|(p, m)| {
                let free: Vec<usize> = (0..truths).filter(|g| !a[..p].contains(&Some(*g))).collect();
                let best = free.iter().copied().filter(|&g| oks[p][g] >= threshold).max_by(|&x, &y| oks[p][x].total_cmp(&oks[p][y]));
                *m == best
            })
        })
        .collect();
    assert_eq!(candidates.len(), 1, "greedy outcome must be unique");
    candidates.into_iter().next().unwrap()
}

pub fn oracle_ap(flags: &[bool], positives: usize) -> f64 {
    let mut prec = Vec::new();
    let mut rec = Vec::new();
    let mut tp = 0usize;
    for (i, &f) in flags.iter().enumerate() {
        tp += f as usize;
        prec.push(tp as f64 / (i + 1) as f64);
        rec.push(tp as f64 / positives as f64);
    }
    let mut sum = 0.0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        let best = (0..flags.len())
            .filter(|&i| rec[i] >= level)
            .map(|i| prec[i])
            .fold(None, |m: Option<f64>, p| Some(m.map_or(p, |m| m.max(p))));
        sum += best.unwrap_or(0.0);
    }
    sum / 101.0
}

/// AP and recall per threshold over all areas.
pub fn oracle_metrics(dets: &[Detection], truths: &[GroundTruthImage], thresholds: &[f64]) -> Vec<(f64, f64)> {
    let positives: usize = truths.iter().map(|t| t.annotations.len()).sum();
    thresholds
        .iter()
        .map(|&t| {
            let mut scored = Vec::new();
            let mut hits = 0;
            for img in truths {
                let mut mine: Vec<&Detection> = dets.iter().filter(|d| d.image_id == img.image_id).collect();
                mine.sort_by(|a, b| b.score.total_cmp(&a.score));
                let oks: Vec<Vec<f64>> = mine
                    .iter()
                    .map(|d| img.annotations.iter().map(|g| oracle_oks(d, g, 0.1)).collect())
                    .collect();
                for (d, m) in mine.iter().zip(greedy_among_all(&oks, t)) {
                    hits += m.is_some() as usize;
                    scored.push((d.score, m.is_some()));
                }
            }
            scored.sort_by(|a, b| b.0.total_cmp(&a.0));
            let flags: Vec<bool> = scored.iter().map(|s| s.1).collect();
            (oracle_ap(&flags, positives), hits as f64 / positives as f64)
        })
        .collect()
}

pub fn random_case(rng: &mut ChaCha8Rng) -> (Vec<Detection>, Vec<GroundTruthImage>) {
    let images = rng.random_range(1..=2u64);
    let mut dets = Vec::new();
    let mut truths = Vec::new();
    for image_id in 0..images {
        let n_gt = rng.random_range(1..=3);
        let mut gts = Vec::new();
        for _ in 0..n_gt {
            let mut a = person(rng.random_range(10.0..54.0), rng.random_range(10.0..54.0), rng.random_range(8.0..30.0));
            for (i, k) in a.keypoints.iter_mut().enumerate() {
                if i > 0 && rng.random_bool(0.2) {
                    k.v = 0;
                } else if rng.random_bool(0.3) {
                    k.v = 1;
                }
            }
            gts.push(a);
        }
        for _ in 0..rng.random_range(0..=3) {
            let base = &gts[rng.random_range(0..gts.len())];
            let spread = rng.random_range(0.0..4.0);
            dets.push(Detection {
                image_id,
                keypoints: base
                    .keypoints
                    .iter()
                    .map(|k| {
                        (!rng.random_bool(0.1)).then(|| PredictedKeypoint {
                            x: k.x + rng.random_range(-spread..=spread),
                            y: k.y + rng.random_range(-spread..=spread),
                            score: 1.0,
                        })
                    })
                    .collect(),
                score: rng.random_range(0.0..1.0),
            });
        }
        truths.push(GroundTruthImage {
            image_id,
            annotations: gts,
        });
    }
    (dets, truths)
}


pub const STRIDE: usize = 4;
pub const GRID: (usize, usize) = (16, 16);

/// Heatmaps from the training encoder and tagmaps holding person `p`'s tag
/// `10 p` at each of its keypoint cells.
pub fn oracle_maps(scene: &Scene) -> (Tensor, Tensor) {
    let enc = encode_targets(&scene.annotations, KEYPOINTS, GRID, STRIDE, DEFAULT_SIGMA);
    let cells = GRID.0 * GRID.1;
    let mut tags = vec![0.0; KEYPOINTS * cells];
    for (p, inst) in enc.instances.iter().enumerate() {
        for &(k, cell) in inst {
            tags[k * cells + cell] = 10.0 * p as f64;
        }
    }
    (enc.heatmaps, Tensor::new(&[KEYPOINTS, GRID.0, GRID.1], tags).unwrap())
}

/// Per person, the labeled grid cells by keypoint type.
pub fn truth_cells(scene: &Scene) -> Vec<Vec<Option<(usize, usize)>>> {
    scene
        .annotations
        .iter()
        .map(|a| {
            a.keypoints
                .iter()
                .map(|k| if k.is_labeled() { grid_cell(k.x, k.y, STRIDE, GRID.0, GRID.1) } else { None })
                .collect()
        })
        .collect()
}

pub fn decoded_cells(inst: &PoseInstance) -> Vec<Option<(usize, usize)>> {
    inst.slots.iter().map(|s| s.as_ref().map(|k| (k.row, k.col))).collect()
}

/// Scenes whose same-type keypoints from different people are at least
/// two cells apart, so every keypoint owns a distinct local maximum.
pub fn separable(scene: &Scene) -> bool {
    let cells = truth_cells(scene);
    for k in 0..KEYPOINTS {
        let pts: Vec<(usize, usize)> = cells.iter().filter_map(|c| c[k]).collect();
        for i in 0..pts.len() {
            for j in i + 1..pts.len() {
                let dr = pts[i].0.abs_diff(pts[j].0);
                let dc = pts[i].1.abs_diff(pts[j].1);
                if dr.max(dc) < 2 {
                    return false;
                }
            }
        }
    }
    true
}

pub fn scenes(count: usize) -> Vec<Scene> {
    let spec = SceneSpec::default();
    (0u64..)
        .map(|i| generate_scene(&spec, i).unwrap())
        .filter(separable)
        .take(count)
        .collect()
}
