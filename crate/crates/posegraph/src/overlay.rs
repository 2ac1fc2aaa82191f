//! Skeleton overlays drawn onto RGB images.

use image::{Rgb, RgbImage};
use posegraph_core::postprocess::PoseInstance;

/// 0-based keypoint pairs joined by a limb segment.
pub fn skeleton(keypoints: usize) -> Vec<(usize, usize)> {
    match keypoints {
        // head to each hand and foot
        5 => vec![(0, 1), (0, 2), (0, 3), (0, 4)],
        17 => vec![
            (15, 13),
            (13, 11),
            (16, 14),
            (14, 12),
            (11, 12),
            (5, 11),
            (6, 12),
            (5, 6),
            (5, 7),
            (6, 8),
            (7, 9),
            (8, 10),
            (1, 2),
            (0, 1),
            (0, 2),
            (1, 3),
            (2, 4),
            (3, 5),
            (4, 6),
        ],
        _ => Vec::new(),
    }
}

/// Distinct saturated colour for instance `i`.
pub fn instance_color(i: usize) -> Rgb<u8> {
    let hue = (i as f64 * 0.618_033_988_75).fract() * 6.0;
    let x = 1.0 - (hue % 2.0 - 1.0).abs();
    let (r, g, b) = match hue as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    let q = |v: f64| (v * 255.0).round() as u8;
    Rgb([q(r), q(g), q(b)])
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

pub fn draw_line(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), c: Rgb<u8>) {
    let steps = (x1 - x0).abs().max((y1 - y0).abs()).ceil().max(1.0) as usize;
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        put(img, (x0 + t * (x1 - x0)).round() as i64, (y0 + t * (y1 - y0)).round() as i64, c);
    }
}

pub fn draw_disc(img: &mut RgbImage, (x, y): (f64, f64), radius: f64, c: Rgb<u8>) {
    let r = radius.ceil() as i64;
    let (cx, cy) = (x.round() as i64, y.round() as i64);
    for dy in -r..=r {
        for dx in -r..=r {
            if ((dx * dx + dy * dy) as f64) <= radius * radius {
                put(img, cx + dx, cy + dy, c);
            }
        }
    }
}

/// Draws limbs, then keypoint markers, for every instance. Coordinates are
/// in `img` pixels.
pub fn draw_instances(img: &mut RgbImage, instances: &[PoseInstance]) {
    let radius = (img.width().min(img.height()) as f64 / 64.0).max(1.0);
    for (i, inst) in instances.iter().enumerate() {
        let c = instance_color(i);
        for (a, b) in skeleton(inst.slots.len()) {
            if let (Some(Some(p)), Some(Some(q))) = (inst.slots.get(a), inst.slots.get(b)) {
                draw_line(img, (p.x, p.y), (q.x, q.y), c);
            }
        }
        for p in inst.slots.iter().flatten() {
            draw_disc(img, (p.x, p.y), radius, c);
        }
    }
}
