//! Decoding network output into people: peak detection, tag grouping and
//! test-time averaging.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels;
use crate::model::PoseNet;
use crate::tensor::Tensor;

/// Left/right keypoint-type pairs swapped by a horizontal mirror.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FlipPairs {
    pairs: Vec<(usize, usize)>,
}

impl FlipPairs {
    /// Validates that every index is below `keypoints` and no type appears
    /// twice.
    pub fn new(pairs: Vec<(usize, usize)>, keypoints: usize) -> Result<Self> {
        let mut seen = vec![false; keypoints];
        for &(a, b) in &pairs {
            for i in [a, b] {
                if i >= keypoints {
                    return Err(Error::config(format!(
                        "flip pair index {i} out of range for {keypoints} keypoints"
                    )));
                }
                if seen[i] {
                    return Err(Error::config(format!("keypoint {i} appears in two flip pairs")));
                }
                seen[i] = true;
            }
        }
        Ok(FlipPairs { pairs })
    }

    /// No swaps.
    pub fn empty() -> Self {
        FlipPairs { pairs: Vec::new() }
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    /// The type `k` becomes after mirroring.
    pub fn partner(&self, k: usize) -> usize {
        for &(a, b) in &self.pairs {
            if a == k {
                return b;
            }
            if b == k {
                return a;
            }
        }
        k
    }

    /// Largest referenced index plus one.
    pub fn max_index(&self) -> usize {
        self.pairs.iter().map(|&(a, b)| a.max(b) + 1).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeypointCandidate {
    pub keypoint: usize,
    pub row: usize,
    pub col: usize,
    pub score: f64,
    pub tag: Vec<f64>,
    /// Input-pixel position after sub-cell refinement.
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceKeypoint {
    pub x: f64,
    pub y: f64,
    pub score: f64,
    pub tag: Vec<f64>,
    pub row: usize,
    pub col: usize,
}

/// One grouped person.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseInstance {
    pub slots: Vec<Option<InstanceKeypoint>>,
    pub mean_tag: Vec<f64>,
}

impl PoseInstance {
    fn start(keypoints: usize, c: &KeypointCandidate) -> Self {
        let mut slots = vec![None; keypoints];
        slots[c.keypoint] = Some(slot_from(c));
        PoseInstance {
            slots,
            mean_tag: c.tag.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.slots.iter().filter(|s| s.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Mean score of the present keypoints.
    pub fn score(&self) -> f64 {
        let n = self.len();
        if n == 0 {
            return 0.0;
        }
        self.slots.iter().flatten().map(|s| s.score).sum::<f64>() / n as f64
    }

    fn push(&mut self, c: &KeypointCandidate) {
        self.slots[c.keypoint] = Some(slot_from(c));
        let n = self.len() as f64;
        for (m, t) in self.mean_tag.iter_mut().zip(&c.tag) {
            *m += (t - *m) / n;
        }
    }
}

fn slot_from(c: &KeypointCandidate) -> InstanceKeypoint {
    InstanceKeypoint {
        x: c.x,
        y: c.y,
        score: c.score,
        tag: c.tag.clone(),
        row: c.row,
        col: c.col,
    }
}

/// A local maximum on a heatmap plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Peak {
    pub keypoint: usize,
    pub row: usize,
    pub col: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub detection_threshold: f64,
    pub window: usize,
    pub max_per_type: usize,
    pub tag_threshold: f64,
    pub refine: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            detection_threshold: 0.1,
            window: 3,
            max_per_type: 30,
            tag_threshold: 1.0,
            refine: true,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.detection_threshold > 0.0 && self.detection_threshold < 1.0) {
            return Err(Error::config("detection_threshold must lie in (0, 1)"));
        }
        if self.window == 0 || self.window % 2 == 0 {
            return Err(Error::config("window must be a positive odd number"));
        }
        if self.max_per_type == 0 {
            return Err(Error::config("max_per_type must be positive"));
        }
        if !(self.tag_threshold > 0.0) {
            return Err(Error::config("tag_threshold must be positive"));
        }
        Ok(())
    }
}

fn planes3(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [k, h, w] => Ok((k, h, w)),
        ref s => Err(Error::shape(op, format!("expected [K, H, W], got {s:?}"))),
    }
}

/// Cells that equal the maximum of their `window x window` neighbourhood
/// (clipped at the borders) and reach `threshold`. Per type, the
/// `max_per_type` best by score are kept; output is ordered by type, then
/// descending score, then `(row, col)`.
pub fn detect_peaks(heatmaps: &Tensor, threshold: f64, window: usize, max_per_type: usize) -> Result<Vec<Peak>> {
    let (k_count, h, w) = planes3(heatmaps, "detect_peaks")?;
    let r = window / 2;
    let mut out = Vec::new();
    for k in 0..k_count {
        let plane = &heatmaps.data()[k * h * w..(k + 1) * h * w];
        let mut found = Vec::new();
        for row in 0..h {
            for col in 0..w {
                let v = plane[row * w + col];
                if !(v >= threshold) {
                    continue;
                }
                let mut is_max = true;
                'scan: for y in row.saturating_sub(r)..(row + r + 1).min(h) {
                    for x in col.saturating_sub(r)..(col + r + 1).min(w) {
                        if plane[y * w + x] > v {
                            is_max = false;
                            break 'scan;
                        }
                    }
                }
                if is_max {
                    found.push(Peak {
                        keypoint: k,
                        row,
                        col,
                        score: v,
                    });
                }
            }
        }
        // cells were visited in (row, col) order, so a stable sort keeps it
        // as the tie-break
        found.sort_by(|a, b| b.score.total_cmp(&a.score));
        found.truncate(max_per_type);
        out.extend(found);
    }
    Ok(out)
}

/// Quarter-cell offset toward the larger of the two neighbours along each
/// axis, as `(dx, dy)`. Border cells move only if both neighbours exist.
pub fn subcell_shift(plane: &[f64], h: usize, w: usize, row: usize, col: usize) -> (f64, f64) {
    let step = |lo: Option<f64>, hi: Option<f64>| match (lo, hi) {
        (Some(a), Some(b)) if b > a => 0.25,
        (Some(a), Some(b)) if a > b => -0.25,
        _ => 0.0,
    };
    let at = |y: usize, x: usize| plane[y * w + x];
    let dx = step(
        col.checked_sub(1).map(|c| at(row, c)),
        (col + 1 < w).then(|| at(row, col + 1)),
    );
    let dy = step(
        row.checked_sub(1).map(|r| at(r, col)),
        (row + 1 < h).then(|| at(row + 1, col)),
    );
    (dx, dy)
}

/// Attaches tags and input-pixel positions to peaks. `tags` is
/// `[K * tag_dim, H, W]`; keypoint `k` reads channels `k*D .. (k+1)*D`.
pub fn candidates_from_peaks(
    peaks: &[Peak],
    heatmaps: &Tensor,
    tags: &Tensor,
    stride: usize,
    refine: bool,
) -> Result<Vec<KeypointCandidate>> {
    let (k_count, h, w) = planes3(heatmaps, "candidates_from_peaks")?;
    let (tc, th, tw) = planes3(tags, "candidates_from_peaks")?;
    if th != h || tw != w || k_count == 0 || tc % k_count != 0 || tc == 0 {
        return Err(Error::shape(
            "candidates_from_peaks",
            format!("tags {:?} do not match heatmaps {:?}", tags.shape(), heatmaps.shape()),
        ));
    }
    let dim = tc / k_count;
    let s = stride as f64;
    peaks
        .iter()
        .map(|p| {
            if p.keypoint >= k_count || p.row >= h || p.col >= w {
                return Err(Error::shape("candidates_from_peaks", "peak outside the grid"));
            }
            let plane = &heatmaps.data()[p.keypoint * h * w..(p.keypoint + 1) * h * w];
            let (dx, dy) = if refine {
                subcell_shift(plane, h, w, p.row, p.col)
            } else {
                (0.0, 0.0)
            };
            let tag = (0..dim)
                .map(|d| tags.data()[((p.keypoint * dim + d) * h + p.row) * w + p.col])
                .collect();
            Ok(KeypointCandidate {
                keypoint: p.keypoint,
                row: p.row,
                col: p.col,
                score: p.score,
                tag,
                x: (p.col as f64 + 0.5 + dx) * s,
                y: (p.row as f64 + 0.5 + dy) * s,
            })
        })
        .collect()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    libm::sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// Greedy tag grouping. Candidates are taken by type `0..K`, and within a
/// type by descending score (ties by `(row, col)`). Each joins the instance
/// with an empty slot for its type whose mean tag is nearest, provided the
/// distance is below `tag_threshold`; otherwise it starts a new instance.
pub fn group_candidates(candidates: &[KeypointCandidate], keypoints: usize, tag_threshold: f64) -> Vec<PoseInstance> {
    let mut order: Vec<&KeypointCandidate> = candidates.iter().filter(|c| c.keypoint < keypoints).collect();
    order.sort_by(|a, b| {
        a.keypoint
            .cmp(&b.keypoint)
            .then(b.score.total_cmp(&a.score))
            .then((a.row, a.col).cmp(&(b.row, b.col)))
    });
    let mut instances: Vec<PoseInstance> = Vec::new();
    for c in order {
        let mut best: Option<(usize, f64)> = None;
        for (i, inst) in instances.iter().enumerate() {
            if inst.slots[c.keypoint].is_some() {
                continue;
            }
            let d = distance(&c.tag, &inst.mean_tag);
            if best.map_or(true, |(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        match best {
            Some((i, d)) if d < tag_threshold => instances[i].push(c),
            _ => instances.push(PoseInstance::start(keypoints, c)),
        }
    }
    instances
}

/// Peaks, tags and grouping for one image's `[K, H, W]` heatmaps and
/// `[K * D, H, W]` tagmaps.
pub fn decode(heatmaps: &Tensor, tags: &Tensor, stride: usize, cfg: &DecodeConfig) -> Result<Vec<PoseInstance>> {
    cfg.validate()?;
    let (k, _, _) = planes3(heatmaps, "decode")?;
    let peaks = detect_peaks(heatmaps, cfg.detection_threshold, cfg.window, cfg.max_per_type)?;
    let cands = candidates_from_peaks(&peaks, heatmaps, tags, stride, cfg.refine)?;
    Ok(group_candidates(&cands, k, cfg.tag_threshold))
}

/// Splits `[.., K, H, W]` into (leading count, K, H, W).
fn planes(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    let s = t.shape();
    if s.len() < 3 {
        return Err(Error::shape(op, format!("expected [.., K, H, W], got {s:?}")));
    }
    let r = s.len();
    Ok((s[..r - 3].iter().product(), s[r - 3], s[r - 2], s[r - 1]))
}

/// Mirrors `[.., K, H, W]` maps horizontally and swaps the paired channels.
pub fn mirror_heatmaps(hm: &Tensor, pairs: &FlipPairs) -> Result<Tensor> {
    let (lead, k, h, w) = planes(hm, "mirror_heatmaps")?;
    if pairs.max_index() > k {
        return Err(Error::shape("mirror_heatmaps", format!("flip pairs reference more than {k} types")));
    }
    let flipped = kernels::flip_horizontal(hm.data(), lead * k, h, w);
    let mut out = vec![0.0; flipped.len()];
    let plane = h * w;
    for n in 0..lead {
        for c in 0..k {
            let src = (n * k + pairs.partner(c)) * plane;
            let dst = (n * k + c) * plane;
            out[dst..dst + plane].copy_from_slice(&flipped[src..src + plane]);
        }
    }
    Tensor::new(hm.shape(), out)
}

/// Mean of `hm` and the un-mirrored, channel-swapped `hm_flipped`.
pub fn flip_average(hm: &Tensor, hm_flipped: &Tensor, pairs: &FlipPairs) -> Result<Tensor> {
    if hm.shape() != hm_flipped.shape() {
        return Err(Error::shape(
            "flip_average",
            format!("{:?} vs {:?}", hm.shape(), hm_flipped.shape()),
        ));
    }
    let back = mirror_heatmaps(hm_flipped, pairs)?;
    let data = hm.data().iter().zip(back.data()).map(|(a, b)| (a + b) / 2.0).collect();
    Tensor::new(hm.shape(), data)
}

/// Resizes every map to `target = (height, width)` and averages them.
/// Uses a running mean so that identical inputs give back the input bit for
/// bit.
pub fn multi_scale_average(maps: &[Tensor], target: (usize, usize)) -> Result<Tensor> {
    if maps.is_empty() {
        return Err(Error::config("multi-scale average needs at least one scale"));
    }
    let (lead, k, _, _) = planes(&maps[0], "multi_scale_average")?;
    let mut shape = maps[0].shape().to_vec();
    let r = shape.len();
    shape[r - 2] = target.0;
    shape[r - 1] = target.1;
    let mut mean = vec![0.0; lead * k * target.0 * target.1];
    for (i, m) in maps.iter().enumerate() {
        let (l, kk, h, w) = planes(m, "multi_scale_average")?;
        if l != lead || kk != k {
            return Err(Error::shape(
                "multi_scale_average",
                format!("{:?} vs {:?}", m.shape(), maps[0].shape()),
            ));
        }
        let resized = kernels::resize_bilinear(m.data(), l * kk, h, w, target.0, target.1);
        if i == 0 {
            mean = resized;
        } else {
            let n = (i + 1) as f64;
            for (a, b) in mean.iter_mut().zip(&resized) {
                *a += (b - *a) / n;
            }
        }
    }
    Tensor::new(&shape, mean)
}

/// Test-time augmentation switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TtaConfig {
    pub flip: bool,
    /// Input scale factors; empty means a single pass at scale 1.
    pub scales: Vec<f64>,
}

impl Default for TtaConfig {
    fn default() -> Self {
        TtaConfig {
            flip: false,
            scales: Vec::new(),
        }
    }
}

/// Heatmaps `[K, h, w]` and tags `[K * D, h, w]` for one `[3, H, W]` image,
/// averaged over the requested flips and scales on the scale-1 grid.
/// Tagmaps come from the unflipped passes only.
pub fn predict_tta(model: &PoseNet, image: &Tensor, tta: &TtaConfig, pairs: &FlipPairs) -> Result<(Tensor, Tensor)> {
    let (c, h, w) = planes3(image, "predict_tta")?;
    if c != 3 {
        return Err(Error::shape("predict_tta", format!("expected an RGB image, got {:?}", image.shape())));
    }
    let stride = model.config.heatmap_stride;
    let grid = (h / stride, w / stride);
    let scales: Vec<f64> = if tta.scales.is_empty() { vec![1.0] } else { tta.scales.clone() };
    let divisor = model.config.size_divisor();
    let mut heats = Vec::with_capacity(scales.len());
    let mut tags = Vec::with_capacity(scales.len());
    for &s in &scales {
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::config(format!("invalid test scale {s}")));
        }
        let sh = libm::round(h as f64 * s) as usize;
        let sw = libm::round(w as f64 * s) as usize;
        if sh == 0 || sw == 0 || sh % divisor != 0 || sw % divisor != 0 {
            return Err(Error::config(format!(
                "scale {s} gives a {sw}x{sh} input, which is not a multiple of {divisor}"
            )));
        }
        let scaled = Tensor::new(&[3, sh, sw], kernels::resize_bilinear(image.data(), 3, h, w, sh, sw))?;
        let pred = model.predict(&scaled)?;
        let hm = pred.heatmaps.batch_item(0)?;
        let tg = pred.tags.batch_item(0)?;
        let hm = if tta.flip {
            let mirrored = Tensor::new(&[3, sh, sw], kernels::flip_horizontal(scaled.data(), 3, sh, sw))?;
            let fp = model.predict(&mirrored)?;
            flip_average(&hm, &fp.heatmaps.batch_item(0)?, pairs)?
        } else {
            hm
        };
        heats.push(hm);
        tags.push(tg);
    }
    Ok((multi_scale_average(&heats, grid)?, multi_scale_average(&tags, grid)?))
}
