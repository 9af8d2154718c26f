//! Loss attention maps from feature gradients, discrimination attention
//! regions, and the region-guided crop that rebuilds each view.

use std::collections::VecDeque;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, GrassError, Result};
use crate::synthdata::ImagePatch;
use crate::tensor::{resize_bilinear, resize_bilinear_region, CropBox, Tensor3};

/// Gradient-weighted activation resized to the view and min-max
/// normalized to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossAttentionMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    /// `(min, max)` of the resized map before normalization.
    pub raw_range: (f64, f64),
}

impl LossAttentionMap {
    /// Wraps already-normalized values.
    pub fn from_values(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        ensure!(values.len() == height * width, Usage, "map size mismatch");
        ensure!(
            values.iter().all(|v| (0.0..=1.0).contains(v)),
            Numeric,
            "map values must lie in [0, 1]"
        );
        let (lo, hi) = min_max(&values);
        Ok(Self {
            height,
            width,
            values,
            raw_range: (lo, hi),
        })
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

fn min_max(v: &[f64]) -> (f64, f64) {
    v.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LamOptions {
    /// Clamp negative activations to zero before normalizing.
    pub rectify: bool,
}

/// `M = (1/D) Σ_d w_d F^d` with `w_d` the spatial mean of channel `d` of
/// `grad`, bilinearly resized to `target_hw` and min-max normalized. A
/// constant map normalizes to all zeros.
pub fn compute_lam(
    features: &Tensor3,
    grad: &Tensor3,
    target_hw: (usize, usize),
    opts: LamOptions,
) -> Result<LossAttentionMap> {
    if features.shape() != grad.shape() {
        return Err(GrassError::Usage(format!(
            "feature shape {:?} differs from gradient shape {:?}",
            features.shape(),
            grad.shape()
        )));
    }
    ensure!(
        features.is_finite() && grad.is_finite(),
        Numeric,
        "non-finite feature or gradient values"
    );
    ensure!(target_hw.0 > 0 && target_hw.1 > 0, Usage, "empty target size");
    let d = features.channels;
    let hw = features.plane_len();
    let mut m = vec![0.0; hw];
    for c in 0..d {
        let w = grad.plane(c).iter().sum::<f64>() / hw as f64;
        if w == 0.0 {
            continue;
        }
        for (acc, f) in m.iter_mut().zip(features.plane(c)) {
            *acc += w * f;
        }
    }
    for v in &mut m {
        *v /= d as f64;
        if opts.rectify {
            *v = v.max(0.0);
        }
    }
    let resized = resize_bilinear(
        &Tensor3::from_vec(1, features.height, features.width, m),
        target_hw.0,
        target_hw.1,
    );
    let (lo, hi) = min_max(&resized.data);
    let span = hi - lo;
    let values = if span > 0.0 && span.is_finite() {
        resized.data.iter().map(|v| ((v - lo) / span).clamp(0.0, 1.0)).collect()
    } else {
        vec![0.0; resized.data.len()]
    };
    Ok(LossAttentionMap {
        height: target_hw.0,
        width: target_hw.1,
        values,
        raw_range: (lo, hi),
    })
}

/// The selected 4-connected super-threshold component.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminationAttentionRegion {
    pub height: usize,
    pub width: usize,
    /// Row-major membership over the map.
    pub pixels: Vec<bool>,
    pub peak: f64,
    pub peak_pos: (usize, usize),
    pub pixel_count: usize,
    /// Smallest rectangle enclosing `pixels`.
    pub bbox: CropBox,
    /// Set when no pixel exceeded the threshold and the whole map was
    /// taken instead.
    pub fallback: bool,
}

impl DiscriminationAttentionRegion {
    /// Box actually cropped: `bbox` grown to at least `min_size` per side.
    pub fn crop_box(&self, min_size: usize) -> CropBox {
        self.bbox.grown_to(min_size, self.height, self.width)
    }
}

/// Component with the highest peak among the 4-connected regions of
/// `{lam > t}`. Ties: larger pixel count, then earliest peak in row-major
/// order. An empty super-threshold set yields the full map.
pub fn extract_dar(lam: &LossAttentionMap, t: f64) -> Result<DiscriminationAttentionRegion> {
    ensure!((0.0..1.0).contains(&t), Config, "threshold must lie in [0, 1), got {t}");
    let (h, w) = (lam.height, lam.width);
    let above: Vec<bool> = lam.values.iter().map(|&v| v > t).collect();
    let mut visited = vec![false; h * w];
    let mut best: Option<(f64, usize, usize, Vec<usize>)> = None;
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !above[start] || visited[start] {
            continue;
        }
        visited[start] = true;
        queue.push_back(start);
        let mut members = Vec::new();
        let (mut peak, mut peak_idx) = (f64::NEG_INFINITY, start);
        while let Some(p) = queue.pop_front() {
            members.push(p);
            let v = lam.values[p];
            if v > peak || (v == peak && p < peak_idx) {
                peak = v;
                peak_idx = p;
            }
            let (y, x) = (p / w, p % w);
            let mut visit = |q: usize| {
                if above[q] && !visited[q] {
                    visited[q] = true;
                    queue.push_back(q);
                }
            };
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
        }
        let better = match &best {
            None => true,
            Some((bp, bidx, _, bm)) => {
                peak > *bp
                    || (peak == *bp && members.len() > bm.len())
                    || (peak == *bp && members.len() == bm.len() && peak_idx < *bidx)
            }
        };
        if better {
            best = Some((peak, peak_idx, members.len(), members));
        }
    }
    Ok(match best {
        Some((peak, peak_idx, count, members)) => {
            let mut pixels = vec![false; h * w];
            let (mut y0, mut y1, mut x0, mut x1) = (h, 0, w, 0);
            for p in members {
                pixels[p] = true;
                let (y, x) = (p / w, p % w);
                y0 = y0.min(y);
                y1 = y1.max(y);
                x0 = x0.min(x);
                x1 = x1.max(x);
            }
            DiscriminationAttentionRegion {
                height: h,
                width: w,
                pixels,
                peak,
                peak_pos: (peak_idx / w, peak_idx % w),
                pixel_count: count,
                bbox: CropBox {
                    x: x0,
                    y: y0,
                    h: y1 - y0 + 1,
                    w: x1 - x0 + 1,
                },
                fallback: false,
            }
        }
        None => {
            let (peak_idx, peak) = lam
                .values
                .iter()
                .copied()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });
            DiscriminationAttentionRegion {
                height: h,
                width: w,
                pixels: vec![true; h * w],
                peak,
                peak_pos: (peak_idx / w, peak_idx % w),
                pixel_count: h * w,
                bbox: CropBox::full(h, w),
                fallback: true,
            }
        }
    })
}

/// Crops `view` to `region` and resizes back to the view size: bilinear
/// for pixels, nearest for the attached mask.
pub fn dacrop(view: &ImagePatch, region: CropBox) -> Result<ImagePatch> {
    let (h, w) = (view.height(), view.width());
    ensure!(region.h > 0 && region.w > 0, Usage, "empty crop box");
    ensure!(
        region.fits_within(h, w),
        Usage,
        "crop box {region:?} outside {h}x{w} view"
    );
    let pixels = if region == CropBox::full(h, w) {
        view.pixels.clone()
    } else {
        resize_bilinear_region(&view.pixels, region, h, w)
    };
    let mask = view.mask.as_ref().map(|m| m.crop_resize(region, h, w));
    Ok(ImagePatch {
        pixels,
        mask,
        source_id: view.source_id.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidedSamplingConfig {
    pub threshold: f64,
    pub min_box: usize,
    pub rectify_lam: bool,
}

impl Default for GuidedSamplingConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            min_box: 8,
            rectify_lam: false,
        }
    }
}

/// Outcome of resampling one view.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidedCrop {
    pub crop: CropBox,
    pub dar_pixels: usize,
    pub peak: f64,
    pub fallback: bool,
}

/// LAM → DAR → DACrop for every view independently.
pub fn guided_resample(
    views: &[ImagePatch],
    features: &[&Tensor3],
    grads: &[Tensor3],
    cfg: &GuidedSamplingConfig,
) -> Result<(Vec<ImagePatch>, Vec<GuidedCrop>)> {
    ensure!(
        views.len() == features.len() && views.len() == grads.len(),
        Usage,
        "views, features and gradients must align ({}, {}, {})",
        views.len(),
        features.len(),
        grads.len()
    );
    ensure!((0.0..1.0).contains(&cfg.threshold), Config, "threshold must lie in [0, 1)");
    let opts = LamOptions {
        rectify: cfg.rectify_lam,
    };
    let results: Vec<Result<(ImagePatch, GuidedCrop)>> = (0..views.len())
        .into_par_iter()
        .map(|i| {
            let v = &views[i];
            let lam = compute_lam(features[i], &grads[i], (v.height(), v.width()), opts)?;
            let dar = extract_dar(&lam, cfg.threshold)?;
            let crop = dar.crop_box(cfg.min_box);
            let out = dacrop(v, crop)?;
            Ok((
                out,
                GuidedCrop {
                    crop,
                    dar_pixels: dar.pixel_count,
                    peak: dar.peak,
                    fallback: dar.fallback,
                },
            ))
        })
        .collect();
    let mut out = Vec::with_capacity(views.len());
    let mut crops = Vec::with_capacity(views.len());
    for r in results {
        let (v, c) = r?;
        out.push(v);
        crops.push(c);
    }
    Ok((out, crops))
}
