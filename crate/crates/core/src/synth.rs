//! Stick-figure scenes and affine augmentation.
//!
//! Every person has five keypoints: head, left hand, right hand, left foot,
//! right foot. "Left" limbs point toward +x before any augmentation, so a
//! mirror swaps the pairs `(1, 2)` and `(3, 4)`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotation::{Annotation, Keypoint};
use crate::error::{Error, Result};
use crate::postprocess::FlipPairs;
use crate::tensor::Tensor;

pub const KEYPOINTS: usize = 5;
pub const KEYPOINT_NAMES: [&str; KEYPOINTS] = ["head", "left_hand", "right_hand", "left_foot", "right_foot"];
pub const SKELETON_FLIP_PAIRS: [(usize, usize); 2] = [(1, 2), (3, 4)];

pub fn flip_pairs() -> FlipPairs {
    FlipPairs::new(SKELETON_FLIP_PAIRS.to_vec(), KEYPOINTS).expect("static pairs are valid")
}

/// Limb segments drawn for a figure, as indices into
/// `[head, left hand, right hand, left foot, right foot, neck, hip]`.
pub const LIMBS: [(usize, usize); 6] = [(5, 0), (5, 1), (5, 2), (6, 3), (6, 4), (5, 6)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub min_persons: usize,
    pub max_persons: usize,
    /// Figure height range in pixels, head to feet.
    pub min_height: f64,
    pub max_height: f64,
    /// Torso lean from vertical, degrees either way.
    pub max_lean_deg: f64,
    /// Arm angle from straight down, degrees.
    pub arm_angle_deg: [f64; 2],
    /// Leg angle from straight down, degrees.
    pub leg_angle_deg: [f64; 2],
    /// Chance that a person is placed on top of an earlier one.
    pub occlusion_prob: f64,
    /// Amplitude of the per-pixel background noise.
    pub noise_level: f64,
    /// Limb thickness relative to figure height.
    pub limb_width: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            seed: 0,
            width: 64,
            height: 64,
            min_persons: 1,
            max_persons: 4,
            min_height: 20.0,
            max_height: 34.0,
            max_lean_deg: 15.0,
            arm_angle_deg: [25.0, 120.0],
            leg_angle_deg: [8.0, 35.0],
            occlusion_prob: 0.2,
            noise_level: 0.15,
            limb_width: 0.07,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width < 8 || self.height < 8 {
            return Err(Error::config("scene must be at least 8x8 pixels"));
        }
        if self.min_persons == 0 || self.min_persons > self.max_persons {
            return Err(Error::config("persons range must satisfy 1 <= min <= max"));
        }
        if !(self.min_height > 2.0 && self.min_height <= self.max_height) {
            return Err(Error::config("figure height range must satisfy 2 < min <= max"));
        }
        for (name, p) in [("occlusion_prob", self.occlusion_prob), ("noise_level", self.noise_level)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name} must lie in [0, 1]")));
            }
        }
        for (name, r) in [("arm_angle_deg", self.arm_angle_deg), ("leg_angle_deg", self.leg_angle_deg)] {
            if !(r[0] <= r[1]) || !(r[0] >= 0.0) || !(r[1] <= 180.0) {
                return Err(Error::config(format!("{name} must be an ordered range within [0, 180]")));
            }
        }
        if !(self.max_lean_deg >= 0.0 && self.max_lean_deg < 90.0) {
            return Err(Error::config("max_lean_deg must lie in [0, 90)"));
        }
        if !(self.limb_width > 0.0 && self.limb_width < 0.5) {
            return Err(Error::config("limb_width must lie in (0, 0.5)"));
        }
        Ok(())
    }

    /// Generator for scene `index`: the seed picks the key, the index the
    /// stream, so every scene is independent of every other.
    pub fn rng(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        rng
    }
}

/// An RGB image `[3, H, W]` with values in `[0, 1]` and its people.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: Tensor,
    pub annotations: Vec<Annotation>,
}

struct Figure {
    /// head, hands, feet, neck, hip
    joints: [(f64, f64); 7],
    height: f64,
    color: [f64; 3],
}

impl Figure {
    fn keypoints(&self) -> [(f64, f64); KEYPOINTS] {
        [self.joints[0], self.joints[1], self.joints[2], self.joints[3], self.joints[4]]
    }

    fn thickness(&self, spec: &SceneSpec) -> f64 {
        (spec.limb_width * self.height).max(1.2)
    }

    fn head_radius(&self) -> f64 {
        (0.11 * self.height).max(1.5)
    }

    fn end_radius(&self) -> f64 {
        (0.07 * self.height).max(1.2)
    }

    /// Anti-aliased coverage in `[0, 1]` of the pixel centred at `(x, y)`.
    fn coverage(&self, spec: &SceneSpec, x: f64, y: f64) -> f64 {
        let half = self.thickness(spec) / 2.0;
        let mut c: f64 = 0.0;
        for &(a, b) in &LIMBS {
            let d = segment_distance((x, y), self.joints[a], self.joints[b]);
            c = c.max(clamp01(half + 0.5 - d));
        }
        for (k, &(px, py)) in self.keypoints().iter().enumerate() {
            let r = if k == 0 { self.head_radius() } else { self.end_radius() };
            let d = libm::hypot(x - px, y - py);
            c = c.max(clamp01(r + 0.5 - d));
        }
        c
    }

    fn bounds(&self, spec: &SceneSpec) -> (f64, f64, f64, f64) {
        let pad = self.head_radius().max(self.thickness(spec));
        let mut b = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for &(x, y) in &self.joints {
            b = (b.0.min(x - pad), b.1.min(y - pad), b.2.max(x + pad), b.3.max(y + pad));
        }
        b
    }
}

fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    libm::hypot(p.0 - (a.0 + t * dx), p.1 - (a.1 + t * dy))
}

fn deg(d: f64) -> f64 {
    d * PI / 180.0
}

/// Fully saturated colour for hue `h` in turns.
fn hue_color(h: f64) -> [f64; 3] {
    let h6 = (h - libm::floor(h)) * 6.0;
    let f = |n: f64| {
        let k = (n + h6) % 6.0;
        1.0 - (k.min(4.0 - k).clamp(0.0, 1.0))
    };
    [f(5.0), f(3.0), f(1.0)]
}

/// Pose of a figure with its hip at the origin, scaled to `height`.
fn pose<R: Rng + ?Sized>(spec: &SceneSpec, height: f64, rng: &mut R) -> [(f64, f64); 7] {
    let lean = deg(rng.random_range(-spec.max_lean_deg..=spec.max_lean_deg));
    // unit vector pointing up the torso, and its perpendicular toward +x
    let up = (libm::sin(lean), -libm::cos(lean));
    let down_angle = |a: f64, side: f64| {
        // rotate the "down" direction (-up) toward +x (side = 1) or -x
        let (s, c) = (libm::sin(a) * side, libm::cos(a));
        (-up.0 * c - up.1 * s, -up.1 * c + up.0 * s)
    };
    let torso = 0.38 * height;
    let neck = (up.0 * torso, up.1 * torso);
    let head = (neck.0 + up.0 * 0.2 * height, neck.1 + up.1 * 0.2 * height);
    let arm = 0.33 * height;
    let leg = 0.42 * height;
    let mut joints = [(0.0, 0.0); 7];
    joints[0] = head;
    for (k, side, len, range, from) in [
        (1, 1.0, arm, spec.arm_angle_deg, neck),
        (2, -1.0, arm, spec.arm_angle_deg, neck),
        (3, 1.0, leg, spec.leg_angle_deg, (0.0, 0.0)),
        (4, -1.0, leg, spec.leg_angle_deg, (0.0, 0.0)),
    ] {
        let a = deg(rng.random_range(range[0]..=range[1]));
        let d = down_angle(a, side);
        joints[k] = (from.0 + d.0 * len, from.1 + d.1 * len);
    }
    joints[5] = neck;
    joints[6] = (0.0, 0.0);
    joints
}

fn place<R: Rng + ?Sized>(
    spec: &SceneSpec,
    mut joints: [(f64, f64); 7],
    height: f64,
    color: [f64; 3],
    anchor: Option<(f64, f64)>,
    rng: &mut R,
) -> Figure {
    let probe = Figure { joints, height, color };
    let (x0, y0, x1, y1) = probe.bounds(spec);
    let (w, h) = (spec.width as f64, spec.height as f64);
    // hip offsets that keep the whole figure inside the frame
    let lo = (1.0 - x0, 1.0 - y0);
    let hi = (w - 1.0 - x1, h - 1.0 - y1);
    let pick = |lo: f64, hi: f64, rng: &mut R, near: Option<f64>| {
        if hi <= lo {
            return (lo + hi) / 2.0;
        }
        match near {
            Some(c) => (c + rng.random_range(-0.3..=0.3) * height).clamp(lo, hi),
            None => rng.random_range(lo..=hi),
        }
    };
    let ox = pick(lo.0, hi.0, rng, anchor.map(|a| a.0));
    let oy = pick(lo.1, hi.1, rng, anchor.map(|a| a.1));
    for j in joints.iter_mut() {
        *j = (j.0 + ox, j.1 + oy);
    }
    Figure { joints, height, color }
}

fn overlaps(spec: &SceneSpec, a: &Figure, b: &Figure) -> bool {
    let (ax0, ay0, ax1, ay1) = a.bounds(spec);
    let (bx0, by0, bx1, by1) = b.bounds(spec);
    ax0 < bx1 && bx0 < ax1 && ay0 < by1 && by0 < ay1
}

/// Renders scene `index`. Bit-identical for equal `(spec.seed, index)`.
pub fn generate_scene(spec: &SceneSpec, index: u64) -> Result<Scene> {
    spec.validate()?;
    let mut rng = spec.rng(index);
    let (w, h) = (spec.width, spec.height);
    let count = rng.random_range(spec.min_persons..=spec.max_persons);
    let hue0: f64 = rng.random();
    let mut figures: Vec<Figure> = Vec::with_capacity(count);
    for p in 0..count {
        let height = rng.random_range(spec.min_height..=spec.max_height).min(0.9 * h.min(w) as f64);
        let joints = pose(spec, height, &mut rng);
        let color = hue_color(hue0 + p as f64 / count as f64);
        let stack = p > 0 && rng.random_bool(spec.occlusion_prob);
        let mut fig = if stack {
            let prev = &figures[rng.random_range(0..p)];
            let anchor = prev.joints[6];
            place(spec, joints, height, color, Some(anchor), &mut rng)
        } else {
            place(spec, joints, height, color, None, &mut rng)
        };
        if !stack {
            for _ in 0..20 {
                if !figures.iter().any(|f| overlaps(spec, f, &fig)) {
                    break;
                }
                fig = place(spec, joints, height, color, None, &mut rng);
            }
        }
        figures.push(fig);
    }

    let mut data = vec![0.0; 3 * h * w];
    let base: [f64; 3] = [rng.random(), rng.random(), rng.random()];
    for c in 0..3 {
        let mean = 0.25 + 0.25 * base[c];
        for px in data[c * h * w..(c + 1) * h * w].iter_mut() {
            *px = clamp01(mean + spec.noise_level * (rng.random::<f64>() - 0.5) * 2.0);
        }
    }
    // coverage of every figure at every pixel, needed for occlusion flags
    let mut cover = vec![0.0; count * h * w];
    for (p, fig) in figures.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                let a = fig.coverage(spec, x as f64 + 0.5, y as f64 + 0.5);
                cover[(p * h + y) * w + x] = a;
                if a > 0.0 {
                    for c in 0..3 {
                        let v = &mut data[(c * h + y) * w + x];
                        *v = *v * (1.0 - a) + fig.color[c] * a;
                    }
                }
            }
        }
    }
    let annotations = figures
        .iter()
        .enumerate()
        .map(|(p, fig)| {
            let kps = fig
                .keypoints()
                .iter()
                .map(|&(x, y)| {
                    let (cx, cy) = ((x as usize).min(w - 1), (y as usize).min(h - 1));
                    let hidden = (p + 1..count).any(|q| cover[(q * h + cy) * w + cx] > 0.5);
                    Keypoint::new(x, y, if hidden { 1 } else { 2 })
                })
                .collect();
            Annotation::from_keypoints(kps, fig.end_radius())
        })
        .collect();
    Ok(Scene {
        image: Tensor::new(&[3, h, w], data)?,
        annotations,
    })
}

/// One draw of augmentation parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    /// Degrees; positive turns +x toward +y (clockwise on screen).
    pub rotation_deg: f64,
    pub scale: f64,
    /// Pixels.
    pub translate: (f64, f64),
    pub flip: bool,
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams {
            rotation_deg: 0.0,
            scale: 1.0,
            translate: (0.0, 0.0),
            flip: false,
        }
    }
}

/// Sampling ranges for [`AugmentParams`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentRanges {
    pub max_rotation_deg: f64,
    pub min_scale: f64,
    pub max_scale: f64,
    /// Largest shift as a fraction of the image width.
    pub max_translate: f64,
    pub flip_prob: f64,
}

impl Default for AugmentRanges {
    fn default() -> Self {
        AugmentRanges {
            max_rotation_deg: 30.0,
            min_scale: 0.75,
            max_scale: 1.5,
            max_translate: 40.0 / 512.0,
            flip_prob: 0.5,
        }
    }
}

impl AugmentRanges {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_rotation_deg >= 0.0 && self.max_rotation_deg <= 180.0) {
            return Err(Error::config("max_rotation_deg must lie in [0, 180]"));
        }
        if !(self.min_scale > 0.0 && self.min_scale <= self.max_scale) {
            return Err(Error::config("scale range must satisfy 0 < min <= max"));
        }
        if !(self.max_translate >= 0.0 && self.max_translate < 1.0) {
            return Err(Error::config("max_translate must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::config("flip_prob must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, width: usize, rng: &mut R) -> AugmentParams {
        let t = self.max_translate * width as f64;
        AugmentParams {
            rotation_deg: rng.random_range(-self.max_rotation_deg..=self.max_rotation_deg),
            scale: rng.random_range(self.min_scale..=self.max_scale),
            translate: (rng.random_range(-t..=t), rng.random_range(-t..=t)),
            flip: rng.random_bool(self.flip_prob),
        }
    }
}

/// The point map of an augmentation on a `w x h` frame: optional mirror,
/// then rotation and scaling about the centre, then translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine {
    width: f64,
    flip: bool,
    center: (f64, f64),
    cos: f64,
    sin: f64,
    scale: f64,
    translate: (f64, f64),
}

impl Affine {
    pub fn new(params: &AugmentParams, width: usize, height: usize) -> Self {
        let a = deg(params.rotation_deg);
        Affine {
            width: width as f64,
            flip: params.flip,
            center: (width as f64 / 2.0, height as f64 / 2.0),
            cos: libm::cos(a),
            sin: libm::sin(a),
            scale: params.scale,
            translate: params.translate,
        }
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let x = if self.flip { self.width - x } else { x };
        let (dx, dy) = (x - self.center.0, y - self.center.1);
        (
            self.center.0 + self.scale * (self.cos * dx - self.sin * dy) + self.translate.0,
            self.center.1 + self.scale * (self.sin * dx + self.cos * dy) + self.translate.1,
        )
    }

    pub fn invert(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = (
            (x - self.translate.0 - self.center.0) / self.scale,
            (y - self.translate.1 - self.center.1) / self.scale,
        );
        let sx = self.center.0 + self.cos * dx + self.sin * dy;
        let sy = self.center.1 - self.sin * dx + self.cos * dy;
        (if self.flip { self.width - sx } else { sx }, sy)
    }
}

/// Bilinear sample of plane `c` at continuous pixel coordinates, zero
/// outside the image.
fn sample_bilinear(data: &[f64], h: usize, w: usize, c: usize, x: f64, y: f64) -> f64 {
    let (fx, fy) = (x - 0.5, y - 0.5);
    let (x0, y0) = (libm::floor(fx), libm::floor(fy));
    let (ax, ay) = (fx - x0, fy - y0);
    let at = |yy: f64, xx: f64| {
        if xx < 0.0 || yy < 0.0 || xx >= w as f64 || yy >= h as f64 {
            0.0
        } else {
            data[(c * h + yy as usize) * w + xx as usize]
        }
    };
    let mut v = 0.0;
    for (yy, wy) in [(y0, 1.0 - ay), (y0 + 1.0, ay)] {
        if wy == 0.0 {
            continue;
        }
        for (xx, wx) in [(x0, 1.0 - ax), (x0 + 1.0, ax)] {
            if wx == 0.0 {
                continue;
            }
            v += wy * wx * at(yy, xx);
        }
    }
    v
}

/// Warps the image and its annotations by one affine map. Mirroring also
/// swaps paired keypoint labels. Keypoints leaving the frame become
/// unlabeled; people left with no labeled keypoint are dropped.
pub fn augment(
    image: &Tensor,
    annotations: &[Annotation],
    params: &AugmentParams,
    pairs: &FlipPairs,
) -> Result<(Tensor, Vec<Annotation>)> {
    let (c, h, w) = match *image.shape() {
        [c, h, w] => (c, h, w),
        ref s => return Err(Error::shape("augment", format!("expected [C, H, W], got {s:?}"))),
    };
    if !(params.scale > 0.0) {
        return Err(Error::config("augment scale must be positive"));
    }
    if *params == AugmentParams::identity() {
        return Ok((image.clone(), annotations.to_vec()));
    }
    let map = Affine::new(params, w, h);
    let src = image.data();
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = map.invert(x as f64 + 0.5, y as f64 + 0.5);
            for ch in 0..c {
                out[(ch * h + y) * w + x] = sample_bilinear(src, h, w, ch, sx, sy);
            }
        }
    }
    let (fw, fh) = (w as f64, h as f64);
    let mut anns = Vec::with_capacity(annotations.len());
    for ann in annotations {
        let moved: Vec<Keypoint> = ann
            .keypoints
            .iter()
            .map(|k| {
                let (x, y) = map.apply(k.x, k.y);
                let inside = x >= 0.0 && y >= 0.0 && x < fw && y < fh;
                Keypoint::new(x, y, if k.is_labeled() && inside { k.v } else { 0 })
            })
            .collect();
        let keypoints: Vec<Keypoint> = if params.flip {
            (0..moved.len()).map(|k| moved[pairs.partner(k).min(moved.len() - 1)]).collect()
        } else {
            moved
        };
        let [bx, by, bw, bh] = ann.bbox;
        let corners = [(bx, by), (bx + bw, by), (bx, by + bh), (bx + bw, by + bh)].map(|(x, y)| map.apply(x, y));
        let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for (x, y) in corners {
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
        let (x0, y0, x1, y1) = (x0.max(0.0), y0.max(0.0), x1.min(fw), y1.min(fh));
        let moved = Annotation {
            keypoints,
            bbox: [x0, y0, (x1 - x0).max(0.0), (y1 - y0).max(0.0)],
            area: ann.area * params.scale * params.scale,
        };
        if moved.labeled_count() > 0 {
            anns.push(moved);
        }
    }
    Ok((Tensor::new(image.shape(), out)?, anns))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_reproducible() {
        let spec = SceneSpec { seed: 7, ..SceneSpec::default() };
        let a = generate_scene(&spec, 3).unwrap();
        let b = generate_scene(&spec, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_scene(&spec, 4).unwrap());
    }

    #[test]
    fn single_person_range() {
        let spec = SceneSpec { min_persons: 1, max_persons: 1, ..SceneSpec::default() };
        for i in 0..10 {
            assert_eq!(generate_scene(&spec, i).unwrap().annotations.len(), 1);
        }
    }

    #[test]
    fn keypoints_in_frame_and_boxed() {
        let spec = SceneSpec::default();
        for i in 0..30 {
            let s = generate_scene(&spec, i).unwrap();
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            for a in &s.annotations {
                assert!(a.box_contains_keypoints());
                for k in &a.keypoints {
                    assert!(k.v == 1 || k.v == 2);
                    assert!(k.x >= 0.0 && k.x < 64.0 && k.y >= 0.0 && k.y < 64.0);
                }
            }
        }
    }

    #[test]
    fn left_limbs_start_on_plus_x() {
        let spec = SceneSpec { max_lean_deg: 0.0, ..SceneSpec::default() };
        let s = generate_scene(&spec, 1).unwrap();
        for a in &s.annotations {
            assert!(a.keypoints[1].x > a.keypoints[2].x);
            assert!(a.keypoints[3].x > a.keypoints[4].x);
        }
    }

    #[test]
    fn identity_augment_is_noop() {
        let s = generate_scene(&SceneSpec::default(), 2).unwrap();
        let (img, anns) = augment(&s.image, &s.annotations, &AugmentParams::identity(), &flip_pairs()).unwrap();
        assert_eq!(img, s.image);
        assert_eq!(anns, s.annotations);
    }

    #[test]
    fn rotation_about_centre() {
        let p = AugmentParams { rotation_deg: 30.0, ..AugmentParams::identity() };
        let m = Affine::new(&p, 64, 64);
        assert_eq!(m.apply(32.0, 32.0), (32.0, 32.0));
        let (x, y) = m.apply(42.0, 32.0);
        assert!((x - (32.0 + 10.0 * libm::cos(PI / 6.0))).abs() < 1e-9);
        assert!((y - (32.0 + 10.0 * libm::sin(PI / 6.0))).abs() < 1e-9);
        let (bx, by) = m.invert(x, y);
        assert!((bx - 42.0).abs() < 1e-12 && (by - 32.0).abs() < 1e-12);
    }

    #[test]
    fn double_flip_restores_annotations() {
        let s = generate_scene(&SceneSpec::default(), 5).unwrap();
        let p = AugmentParams { flip: true, ..AugmentParams::identity() };
        let (img1, a1) = augment(&s.image, &s.annotations, &p, &flip_pairs()).unwrap();
        assert_eq!(a1[0].keypoints[1].x, 64.0 - s.annotations[0].keypoints[2].x);
        let (img2, a2) = augment(&img1, &a1, &p, &flip_pairs()).unwrap();
        assert_eq!(img2, s.image);
        for (a, b) in a2.iter().zip(&s.annotations) {
            for (ka, kb) in a.keypoints.iter().zip(&b.keypoints) {
                assert!((ka.x - kb.x).abs() < 1e-12 && (ka.y - kb.y).abs() < 1e-12 && ka.v == kb.v);
            }
            for i in 0..4 {
                assert!((a.bbox[i] - b.bbox[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn keypoints_pushed_out_are_unlabeled() {
        let ann = Annotation::from_keypoints(
            vec![Keypoint::new(60.0, 10.0, 2), Keypoint::new(10.0, 10.0, 2)],
            1.0,
        );
        let p = AugmentParams { translate: (10.0, 0.0), ..AugmentParams::identity() };
        let (_, out) = augment(&Tensor::zeros(&[3, 64, 64]), &[ann], &p, &FlipPairs::empty()).unwrap();
        assert_eq!(out[0].keypoints[0].v, 0);
        assert_eq!(out[0].keypoints[1].v, 2);
    }
}
