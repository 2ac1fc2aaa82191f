//! Training targets and losses.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::annotation::Annotation;
use crate::error::{Error, Result};
use crate::heads::HeadOutput;
use crate::tape::{InstanceCells, Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_SIGMA: f64 = 2.0;
pub const TAG_SIGMA: f64 = 1.0;

/// Gaussian heatmap targets plus the grid cells each person's tags are read
/// from.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetEncoding {
    /// `[K, H, W]`, values in `[0, 1]`.
    pub heatmaps: Tensor,
    /// Per person, `(keypoint type, flat grid index)` of every labeled
    /// keypoint that falls on the grid.
    pub instances: Vec<InstanceCells>,
}

/// Grid cell `(row, col)` containing pixel coordinate `(x, y)`, or `None`
/// when it falls outside the `[rows, cols]` grid.
pub fn grid_cell(x: f64, y: f64, stride: usize, rows: usize, cols: usize) -> Option<(usize, usize)> {
    let gx = libm::floor(x / stride as f64);
    let gy = libm::floor(y / stride as f64);
    if gx < 0.0 || gy < 0.0 || gx >= cols as f64 || gy >= rows as f64 || !gx.is_finite() || !gy.is_finite() {
        return None;
    }
    Some((gy as usize, gx as usize))
}

/// Renders per-type Gaussian targets on a `grid = (rows, cols)` heatmap
/// grid with spacing `stride` pixels. Each labeled keypoint contributes
/// `exp(-d^2 / (2 sigma^2))`, `d` measured in cells from the cell containing
/// it; overlapping persons combine by maximum. Keypoints off the grid are
/// skipped.
pub fn encode_targets(
    annotations: &[Annotation],
    keypoints: usize,
    grid: (usize, usize),
    stride: usize,
    sigma: f64,
) -> TargetEncoding {
    let (rows, cols) = grid;
    let mut heat = vec![0.0; keypoints * rows * cols];
    let mut instances = Vec::with_capacity(annotations.len());
    let denom = 2.0 * sigma * sigma;
    for ann in annotations {
        let mut cells = Vec::new();
        for (k, kp) in ann.keypoints.iter().enumerate().take(keypoints) {
            if !kp.is_labeled() {
                continue;
            }
            let Some((cy, cx)) = grid_cell(kp.x, kp.y, stride, rows, cols) else {
                continue;
            };
            cells.push((k, cy * cols + cx));
            let plane = &mut heat[k * rows * cols..(k + 1) * rows * cols];
            for r in 0..rows {
                let dy = r as f64 - cy as f64;
                for c in 0..cols {
                    let dx = c as f64 - cx as f64;
                    let v = libm::exp(-(dx * dx + dy * dy) / denom);
                    let slot = &mut plane[r * cols + c];
                    if v > *slot {
                        *slot = v;
                    }
                }
            }
        }
        instances.push(cells);
    }
    TargetEncoding {
        heatmaps: Tensor::new(&[keypoints, rows, cols], heat).expect("sized above"),
        instances,
    }
}

/// Stacks per-image encodings into `[N, K, H, W]` targets and per-image
/// instance lists.
pub fn stack_targets(encodings: &[TargetEncoding]) -> Result<(Tensor, Vec<Vec<InstanceCells>>)> {
    let maps: Vec<Tensor> = encodings.iter().map(|e| e.heatmaps.clone()).collect();
    let heat = Tensor::stack(&maps)?;
    let inst = encodings.iter().map(|e| e.instances.clone()).collect();
    Ok((heat, inst))
}

/// Mean squared error over all heatmap cells.
pub fn heatmap_loss(tape: &mut Tape, pred: Var, target: &Tensor) -> Result<Var> {
    tape.mse(pred, target)
}

/// Associative-embedding `(pull, push)` terms.
pub fn ae_loss(
    tape: &mut Tape,
    tags: Var,
    tag_dim: usize,
    instances: &[Vec<InstanceCells>],
) -> Result<(Var, Var)> {
    let both = tape.assoc_embed_loss(tags, tag_dim, instances, TAG_SIGMA)?;
    Ok((tape.index(both, 0)?, tape.index(both, 1)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub pull: f64,
    pub push: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { pull: 0.1, push: 0.1 }
    }
}

/// The loss scalar and its components.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    pub heatmap: Var,
    pub pull: Var,
    pub push: Var,
}

/// `heatmap + w.pull * pull + w.push * push`.
pub fn total_loss(
    tape: &mut Tape,
    output: &HeadOutput,
    target_heatmaps: &Tensor,
    instances: &[Vec<InstanceCells>],
    tag_dim: usize,
    weights: LossWeights,
) -> Result<LossParts> {
    if !(weights.pull >= 0.0 && weights.push >= 0.0) {
        return Err(Error::config("loss weights must be non-negative"));
    }
    let heatmap = heatmap_loss(tape, output.heatmaps, target_heatmaps)?;
    let (pull, push) = ae_loss(tape, output.tags, tag_dim, instances)?;
    let wp = tape.scale(pull, weights.pull);
    let wq = tape.scale(push, weights.push);
    let t = tape.add(heatmap, wp)?;
    let total = tape.add(t, wq)?;
    Ok(LossParts {
        total,
        heatmap,
        pull,
        push,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::Keypoint;
    use alloc::vec;

    fn person(points: &[(f64, f64)]) -> Annotation {
        Annotation::from_keypoints(points.iter().map(|&(x, y)| Keypoint::new(x, y, 2)).collect(), 1.0)
    }

    #[test]
    fn peak_is_one_at_cell_and_gaussian_falls_off() {
        // pixel (10, 6) with stride 4 lies in cell row 1, col 2
        let enc = encode_targets(&[person(&[(10.0, 6.0)])], 1, (8, 8), 4, 2.0);
        let h = enc.heatmaps.data();
        assert_eq!(h[8 + 2], 1.0);
        // (row 3, col 4) is 2*sqrt(2) = sigma*sqrt(2) cells away
        assert!((h[3 * 8 + 4] - libm::exp(-1.0)).abs() < 1e-15);
        assert!(h.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(enc.instances, vec![vec![(0, 10)]]);
    }

    #[test]
    fn coincident_people_use_max() {
        let p = person(&[(10.0, 6.0)]);
        let enc = encode_targets(&[p.clone(), p], 1, (8, 8), 4, 2.0);
        assert_eq!(enc.heatmaps.data().iter().cloned().fold(0.0, f64::max), 1.0);
    }

    #[test]
    fn hidden_and_offgrid_points_are_skipped() {
        let ann = Annotation::from_keypoints(
            vec![
                Keypoint::new(5.0, 5.0, 0),
                Keypoint::new(40.0, 5.0, 2),
                Keypoint::new(5.0, 5.0, 1),
            ],
            1.0,
        );
        let enc = encode_targets(&[ann], 3, (8, 8), 4, 2.0);
        assert!(enc.heatmaps.data()[..64].iter().all(|&v| v == 0.0));
        assert!(enc.heatmaps.data()[64..128].iter().all(|&v| v == 0.0));
        assert_eq!(enc.instances, vec![vec![(2, 9)]]);
    }
}
