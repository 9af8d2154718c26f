//! View construction: copy each image `K` times, apply a random spectral
//! transform, then a random spatial transform.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::rng::{self, tag};
use crate::synthdata::{hsv_to_rgb, ImagePatch, Mask};
use crate::tensor::{resize_bilinear_region, CropBox, Tensor3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectralConfig {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub jitter_probability: f64,
    pub grayscale_probability: f64,
    pub blur_probability: f64,
    pub blur_sigma: [f64; 2],
}

impl Default for SpectralConfig {
    fn default() -> Self {
        Self {
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.1,
            jitter_probability: 0.8,
            grayscale_probability: 0.2,
            blur_probability: 0.0,
            blur_sigma: [0.1, 2.0],
        }
    }
}

impl SpectralConfig {
    pub fn identity() -> Self {
        Self {
            jitter_probability: 0.0,
            grayscale_probability: 0.0,
            blur_probability: 0.0,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpatialConfig {
    /// Crop area as a fraction of the image area.
    pub scale: [f64; 2],
    /// Crop aspect ratio (width / height).
    pub ratio: [f64; 2],
    pub hflip_probability: f64,
    pub vflip_probability: f64,
}

impl Default for SpatialConfig {
    fn default() -> Self {
        Self {
            scale: [0.2, 1.0],
            ratio: [3.0 / 4.0, 4.0 / 3.0],
            hflip_probability: 0.5,
            vflip_probability: 0.0,
        }
    }
}

impl SpatialConfig {
    pub fn identity() -> Self {
        Self {
            scale: [1.0, 1.0],
            ratio: [1.0, 1.0],
            hflip_probability: 0.0,
            vflip_probability: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Views per image.
    pub views: usize,
    pub spectral: SpectralConfig,
    pub spatial: SpatialConfig,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            views: 2,
            spectral: SpectralConfig::default(),
            spatial: SpatialConfig::default(),
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// No-op spectral transform, full-image crop, no flips.
    pub fn identity(views: usize) -> Self {
        Self {
            views,
            spectral: SpectralConfig::identity(),
            spatial: SpatialConfig::identity(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.views >= 2, Config, "augment.views must be >= 2");
        let [lo, hi] = self.spatial.scale;
        ensure!(
            lo > 0.0 && lo <= hi && hi <= 1.0,
            Config,
            "augment.spatial.scale must satisfy 0 < lo <= hi <= 1"
        );
        let [rlo, rhi] = self.spatial.ratio;
        ensure!(rlo > 0.0 && rlo <= rhi, Config, "augment.spatial.ratio invalid");
        let s = &self.spectral;
        for (name, p) in [
            ("jitter_probability", s.jitter_probability),
            ("grayscale_probability", s.grayscale_probability),
            ("blur_probability", s.blur_probability),
            ("hflip_probability", self.spatial.hflip_probability),
            ("vflip_probability", self.spatial.vflip_probability),
        ] {
            ensure!((0.0..=1.0).contains(&p), Config, "augment {name} must be in [0, 1]");
        }
        for (name, v) in [
            ("brightness", s.brightness),
            ("contrast", s.contrast),
            ("saturation", s.saturation),
        ] {
            ensure!(v >= 0.0, Config, "augment.spectral.{name} must be >= 0");
        }
        ensure!((0.0..=0.5).contains(&s.hue), Config, "augment.spectral.hue must be in [0, 0.5]");
        Ok(())
    }
}

/// Geometry applied to produce one view, in source-image pixel coordinates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewRecord {
    pub source_index: usize,
    pub view_index: usize,
    pub source_id: String,
    pub source_height: usize,
    pub source_width: usize,
    pub crop: CropBox,
    pub hflip: bool,
    pub vflip: bool,
    pub out_height: usize,
    pub out_width: usize,
}

/// `N × K` views stored row-major: view `(i, j)` at `i * K + j`.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewBatch {
    pub n: usize,
    pub k: usize,
    pub views: Vec<ImagePatch>,
    pub records: Vec<ViewRecord>,
}

impl ViewBatch {
    pub fn view(&self, i: usize, j: usize) -> &ImagePatch {
        &self.views[i * self.k + j]
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }
}

/// Builds `cfg.views` views of every patch. `key` selects the random
/// stream; view `(i, j)` draws from its own stream derived from
/// `(key, i, j)`.
pub fn augment_batch(batch: &[ImagePatch], cfg: &AugmentConfig, key: u64) -> Result<ViewBatch> {
    cfg.validate()?;
    ensure!(!batch.is_empty(), Data, "empty batch");
    let (h, w) = (batch[0].height(), batch[0].width());
    ensure!(
        batch.iter().all(|p| p.height() == h && p.width() == w),
        Data,
        "all patches in a batch must share one spatial size"
    );
    let k = cfg.views;
    let produced: Vec<(ImagePatch, ViewRecord)> = (0..batch.len() * k)
        .into_par_iter()
        .map(|idx| {
            let (i, j) = (idx / k, idx % k);
            let mut rng = rng::stream(key, &[tag::AUGMENT, i as u64, j as u64]);
            augment_one(&batch[i], i, j, cfg, &mut rng)
        })
        .collect();
    let (views, records) = produced.into_iter().unzip();
    Ok(ViewBatch {
        n: batch.len(),
        k,
        views,
        records,
    })
}

fn augment_one(
    src: &ImagePatch,
    i: usize,
    j: usize,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> (ImagePatch, ViewRecord) {
    let (h, w) = (src.height(), src.width());
    let mut pixels = src.pixels.clone();
    apply_spectral(&mut pixels, &cfg.spectral, rng);

    let crop = sample_crop(h, w, &cfg.spatial, rng);
    let hflip = rng.gen_bool(cfg.spatial.hflip_probability);
    let vflip = rng.gen_bool(cfg.spatial.vflip_probability);
    let record = ViewRecord {
        source_index: i,
        view_index: j,
        source_id: src.source_id.clone(),
        source_height: h,
        source_width: w,
        crop,
        hflip,
        vflip,
        out_height: h,
        out_width: w,
    };
    let mut out = resize_bilinear_region(&pixels, crop, h, w);
    flip_tensor(&mut out, hflip, vflip);
    let mask = src
        .mask
        .as_ref()
        .map(|m| transport_mask(&record, m).expect("record built from this mask's image"));
    let view = ImagePatch {
        pixels: out,
        mask,
        source_id: src.source_id.clone(),
    };
    (view, record)
}

/// Carries a source mask through a view's geometry with nearest-neighbour
/// sampling.
pub fn transport_mask(record: &ViewRecord, source_mask: &Mask) -> Result<Mask> {
    ensure!(
        source_mask.height == record.source_height && source_mask.width == record.source_width,
        Data,
        "mask {}x{} does not match view source {}x{}",
        source_mask.height,
        source_mask.width,
        record.source_height,
        record.source_width
    );
    let mut m = source_mask.crop_resize(record.crop, record.out_height, record.out_width);
    flip_labels(&mut m, record.hflip, record.vflip);
    Ok(m)
}

fn flip_tensor(t: &mut Tensor3, hflip: bool, vflip: bool) {
    let (h, w) = (t.height, t.width);
    for c in 0..t.channels {
        let plane = t.plane_mut(c);
        if hflip {
            for row in plane.chunks_mut(w) {
                row.reverse();
            }
        }
        if vflip {
            for y in 0..h / 2 {
                for x in 0..w {
                    plane.swap(y * w + x, (h - 1 - y) * w + x);
                }
            }
        }
    }
}

fn flip_labels(m: &mut Mask, hflip: bool, vflip: bool) {
    let (h, w) = (m.height, m.width);
    if hflip {
        for row in m.labels.chunks_mut(w) {
            row.reverse();
        }
    }
    if vflip {
        for y in 0..h / 2 {
            for x in 0..w {
                m.labels.swap(y * w + x, (h - 1 - y) * w + x);
            }
        }
    }
}

/// Random-resized-crop box sampling with ten rejection attempts and a
/// centre-crop fallback.
fn sample_crop(h: usize, w: usize, cfg: &SpatialConfig, rng: &mut ChaCha8Rng) -> CropBox {
    let area = (h * w) as f64;
    let [slo, shi] = cfg.scale;
    let (llo, lhi) = (cfg.ratio[0].ln(), cfg.ratio[1].ln());
    for _ in 0..10 {
        let target = area * uniform(rng, slo, shi);
        let ratio = uniform(rng, llo, lhi).exp();
        let cw = (target * ratio).sqrt().round() as usize;
        let ch = (target / ratio).sqrt().round() as usize;
        if cw > 0 && ch > 0 && cw <= w && ch <= h {
            let y = rng.gen_range(0..=h - ch);
            let x = rng.gen_range(0..=w - cw);
            return CropBox { x, y, h: ch, w: cw };
        }
    }
    let in_ratio = w as f64 / h as f64;
    let (cw, ch) = if in_ratio < cfg.ratio[0] {
        (w, ((w as f64 / cfg.ratio[0]).round() as usize).clamp(1, h))
    } else if in_ratio > cfg.ratio[1] {
        (((h as f64 * cfg.ratio[1]).round() as usize).clamp(1, w), h)
    } else {
        (w, h)
    };
    CropBox {
        x: (w - cw) / 2,
        y: (h - ch) / 2,
        h: ch,
        w: cw,
    }
}

#[inline]
fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

fn jitter_factor(rng: &mut ChaCha8Rng, strength: f64) -> Option<f64> {
    (strength > 0.0).then(|| uniform(rng, (1.0 - strength).max(0.0), 1.0 + strength))
}

fn apply_spectral(t: &mut Tensor3, cfg: &SpectralConfig, rng: &mut ChaCha8Rng) {
    if t.channels != 3 {
        return;
    }
    if rng.gen_bool(cfg.jitter_probability) {
        let mut order = [0u8, 1, 2, 3];
        order.shuffle(rng);
        for op in order {
            match op {
                0 => {
                    if let Some(f) = jitter_factor(rng, cfg.brightness) {
                        t.map_inplace(|v| (v * f).clamp(0.0, 1.0));
                    }
                }
                1 => {
                    if let Some(f) = jitter_factor(rng, cfg.contrast) {
                        let mean = grayscale(t).iter().sum::<f64>() / t.plane_len() as f64;
                        t.map_inplace(|v| ((v - mean) * f + mean).clamp(0.0, 1.0));
                    }
                }
                2 => {
                    if let Some(f) = jitter_factor(rng, cfg.saturation) {
                        let gray = grayscale(t);
                        for c in 0..3 {
                            for (v, g) in t.plane_mut(c).iter_mut().zip(&gray) {
                                *v = ((*v - g) * f + g).clamp(0.0, 1.0);
                            }
                        }
                    }
                }
                _ => {
                    if cfg.hue > 0.0 {
                        let shift = uniform(rng, -cfg.hue, cfg.hue);
                        shift_hue(t, shift);
                    }
                }
            }
        }
    }
    if rng.gen_bool(cfg.grayscale_probability) {
        let gray = grayscale(t);
        for c in 0..3 {
            t.plane_mut(c).copy_from_slice(&gray);
        }
    }
    if rng.gen_bool(cfg.blur_probability) {
        let sigma = uniform(rng, cfg.blur_sigma[0], cfg.blur_sigma[1]);
        gaussian_blur(t, sigma);
    }
}

fn grayscale(t: &Tensor3) -> Vec<f64> {
    let (r, g, b) = (t.plane(0), t.plane(1), t.plane(2));
    (0..t.plane_len())
        .map(|i| 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i])
        .collect()
}

fn shift_hue(t: &mut Tensor3, shift: f64) {
    for i in 0..t.plane_len() {
        let (r, g, b) = (t.data[i], t.data[t.plane_len() + i], t.data[2 * t.plane_len() + i]);
        let max = r.max(g).max(b);
        let min = r.min(g).min(b);
        let delta = max - min;
        if delta <= 0.0 {
            continue;
        }
        let hue = if max == r {
            ((g - b) / delta).rem_euclid(6.0)
        } else if max == g {
            (b - r) / delta + 2.0
        } else {
            (r - g) / delta + 4.0
        } / 6.0;
        let rgb = hsv_to_rgb(hue + shift, delta / max, max);
        let n = t.plane_len();
        for (c, v) in rgb.iter().enumerate() {
            t.data[c * n + i] = v.clamp(0.0, 1.0);
        }
    }
}

fn gaussian_blur(t: &mut Tensor3, sigma: f64) {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let (h, w) = (t.height as isize, t.width as isize);
    for c in 0..t.channels {
        let src = t.plane(c).to_vec();
        let mut tmp = vec![0.0; src.len()];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, d) in (-radius..=radius).enumerate() {
                    let xx = (x + d).clamp(0, w - 1);
                    acc += kernel[ki] * src[(y * w + xx) as usize];
                }
                tmp[(y * w + x) as usize] = acc;
            }
        }
        let dst = t.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, d) in (-radius..=radius).enumerate() {
                    let yy = (y + d).clamp(0, h - 1);
                    acc += kernel[ki] * tmp[(yy * w + x) as usize];
                }
                dst[(y * w + x) as usize] = acc.clamp(0.0, 1.0);
            }
        }
    }
}
