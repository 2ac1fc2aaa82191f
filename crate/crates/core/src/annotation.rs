//! Ground-truth person annotations.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

/// Visibility flag: 0 unlabeled, 1 labeled but hidden, 2 visible.
pub type Visibility = u8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub v: Visibility,
}

impl Keypoint {
    pub fn new(x: f64, y: f64, v: Visibility) -> Self {
        Keypoint { x, y, v }
    }

    pub fn unlabeled() -> Self {
        Keypoint { x: 0.0, y: 0.0, v: 0 }
    }

    pub fn is_labeled(&self) -> bool {
        self.v > 0
    }
}

/// One annotated person.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub keypoints: Vec<Keypoint>,
    /// `[x, y, width, height]` in pixels.
    pub bbox: [f64; 4],
    pub area: f64,
}

impl Annotation {
    /// Builds an annotation whose box is the tight bounds of the labeled
    /// keypoints grown by `margin` on every side.
    pub fn from_keypoints(keypoints: Vec<Keypoint>, margin: f64) -> Self {
        let mut ann = Annotation {
            keypoints,
            bbox: [0.0; 4],
            area: 0.0,
        };
        ann.refresh_box(margin);
        ann
    }

    pub fn refresh_box(&mut self, margin: f64) {
        let labeled: Vec<&Keypoint> = self.keypoints.iter().filter(|k| k.is_labeled()).collect();
        if labeled.is_empty() {
            self.bbox = [0.0; 4];
            self.area = 0.0;
            return;
        }
        let (mut x0, mut y0) = (f64::INFINITY, f64::INFINITY);
        let (mut x1, mut y1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for k in labeled {
            x0 = x0.min(k.x);
            y0 = y0.min(k.y);
            x1 = x1.max(k.x);
            y1 = y1.max(k.y);
        }
        let (x0, y0) = (x0 - margin, y0 - margin);
        let (w, h) = (x1 - x0 + margin, y1 - y0 + margin);
        self.bbox = [x0, y0, w, h];
        self.area = w * h;
    }

    pub fn labeled_count(&self) -> usize {
        self.keypoints.iter().filter(|k| k.is_labeled()).count()
    }

    /// Does the box contain every labeled keypoint?
    pub fn box_contains_keypoints(&self) -> bool {
        let [x, y, w, h] = self.bbox;
        self.keypoints
            .iter()
            .filter(|k| k.is_labeled())
            .all(|k| k.x >= x && k.x <= x + w && k.y >= y && k.y <= y + h)
    }
}
