use image::{Rgb, RgbImage};

use grass_core::lamcore::LossAttentionMap;
use grass_core::tensor::{CropBox, Tensor3};

const GAP: u32 = 4;

fn to_rgb(t: &Tensor3) -> RgbImage {
    RgbImage::from_fn(t.width as u32, t.height as u32, |x, y| {
        let px = |c| (t.get(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    })
}

/// Blue to red through yellow.
fn heat(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    if v < 0.5 {
        let u = v * 2.0;
        [u, u, 1.0 - u]
    } else {
        let u = (v - 0.5) * 2.0;
        [1.0, 1.0 - u, 0.0]
    }
}

fn heatmap(lam: &LossAttentionMap) -> RgbImage {
    RgbImage::from_fn(lam.width as u32, lam.height as u32, |x, y| {
        let c = heat(lam.get(y as usize, x as usize));
        Rgb(c.map(|v| (v * 255.0).round() as u8))
    })
}

fn overlay(view: &RgbImage, heat: &RgbImage) -> RgbImage {
    RgbImage::from_fn(view.width(), view.height(), |x, y| {
        let (a, b) = (view.get_pixel(x, y), heat.get_pixel(x, y));
        Rgb([0, 1, 2].map(|c| ((a[c] as u16 + b[c] as u16) / 2) as u8))
    })
}

/// White dashes, three on and two off, along the box outline.
fn dashed_box(img: &mut RgbImage, b: CropBox) {
    let (x0, y0) = (b.x as u32, b.y as u32);
    let (x1, y1) = (x0 + b.w as u32 - 1, y0 + b.h as u32 - 1);
    let mut put = |x: u32, y: u32, i: u32| {
        if i % 5 < 3 && x < img.width() && y < img.height() {
            img.put_pixel(x, y, Rgb([255, 255, 255]));
        }
    };
    for (i, x) in (x0..=x1).enumerate() {
        put(x, y0, i as u32);
        put(x, y1, i as u32);
    }
    for (i, y) in (y0..=y1).enumerate() {
        put(x0, y, i as u32);
        put(x1, y, i as u32);
    }
}

/// `view | attention map | overlay with crop box | resampled crop`.
pub fn strip(view: &Tensor3, lam: &LossAttentionMap, crop: CropBox, resampled: &Tensor3) -> RgbImage {
    let v = to_rgb(view);
    let h = heatmap(lam);
    let mut o = overlay(&v, &h);
    dashed_box(&mut o, crop);
    let r = to_rgb(resampled);
    let panels = [v, h, o, r];
    let width = panels.iter().map(|p| p.width()).sum::<u32>() + GAP * 3;
    let height = panels.iter().map(|p| p.height()).max().unwrap_or(0);
    let mut out = RgbImage::from_pixel(width, height, Rgb([0, 0, 0]));
    let mut x = 0;
    for p in &panels {
        image::imageops::replace(&mut out, p, x as i64, 0);
        x += p.width() + GAP;
    }
    out
}
