//! Conversions between `[3, H, W]` tensors in `[0, 1]` and 8-bit RGB images.

use std::path::Path;

use anyhow::{ensure, Context, Result};
use image::{imageops::FilterType, RgbImage};
use posegraph_core::Tensor;

pub fn to_rgb(t: &Tensor) -> Result<RgbImage> {
    let s = t.shape();
    ensure!(s.len() == 3 && s[0] == 3, "expected a [3, H, W] image tensor, got {s:?}");
    let (h, w) = (s[1], s[2]);
    let d = t.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let q = |c: usize| (d[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([q(0), q(1), q(2)])
    }))
}

pub fn from_rgb(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * h * w + i] = f64::from(p.0[c]) / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data).expect("sized above")
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).with_context(|| format!("reading image {}", path.display()))?;
    Ok(img.to_rgb8())
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .with_context(|| format!("writing image {}", path.display()))
}

/// Resizes `img` to exactly `width x height` and returns it with the
/// factors mapping network coordinates back to the original image.
pub fn fit(img: &RgbImage, width: usize, height: usize) -> (Tensor, f64, f64) {
    let sx = img.width() as f64 / width as f64;
    let sy = img.height() as f64 / height as f64;
    if img.width() as usize == width && img.height() as usize == height {
        return (from_rgb(img), 1.0, 1.0);
    }
    let resized = image::imageops::resize(img, width as u32, height as u32, FilterType::Triangle);
    (from_rgb(&resized), sx, sy)
}
