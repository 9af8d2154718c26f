//! Synthetic ground-object mosaics and the on-disk dataset layout
//! (`images/<name>.png`, `masks/<name>.png`).

use std::fs;
use std::path::{Path, PathBuf};

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, GrassError, Result};
use crate::rng::{self, tag};
use crate::tensor::{CropBox, Tensor3};

/// Per-pixel class indices aligned with an image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Self {
        assert_eq!(labels.len(), height * width, "mask length");
        Self {
            height,
            width,
            labels,
        }
    }

    pub fn uniform(height: usize, width: usize, class: u8) -> Self {
        Self::new(height, width, vec![class; height * width])
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn crop_resize(&self, region: CropBox, out_h: usize, out_w: usize) -> Mask {
        let labels =
            crate::tensor::resize_nearest_labels(&self.labels, self.width, region, out_h, out_w);
        Mask::new(out_h, out_w, labels)
    }
}

/// An image with values in `[0, 1]` and an optional aligned class mask.
/// Masks are carried for analysis and evaluation only.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePatch {
    pub pixels: Tensor3,
    pub mask: Option<Mask>,
    pub source_id: String,
}

impl ImagePatch {
    pub fn new(pixels: Tensor3, mask: Option<Mask>, source_id: impl Into<String>) -> Result<Self> {
        ensure!(
            pixels.data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)),
            Data,
            "pixel values must be finite and within [0, 1]"
        );
        if let Some(m) = &mask {
            ensure!(
                m.height == pixels.height && m.width == pixels.width,
                Data,
                "mask {}x{} does not match image {}x{}",
                m.height,
                m.width,
                pixels.height,
                pixels.width
            );
        }
        Ok(Self {
            pixels,
            mask,
            source_id: source_id.into(),
        })
    }

    pub fn height(&self) -> usize {
        self.pixels.height
    }

    pub fn width(&self) -> usize {
        self.pixels.width
    }
}

/// Number of distinct class indices present in `mask`.
pub fn count_classes(mask: &Mask) -> usize {
    let mut seen = [false; 256];
    for &l in &mask.labels {
        seen[l as usize] = true;
    }
    seen.iter().filter(|&&s| s).count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassColor {
    pub base: [f64; 3],
    pub noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MosaicSpec {
    pub image_size: usize,
    pub num_classes: usize,
    /// Inclusive range the per-image grid size is drawn from.
    pub tiles_per_side: [usize; 2],
    pub texture_seed: u64,
    /// Empty means an automatically spread palette.
    pub class_palette: Vec<ClassColor>,
    /// Relative class frequencies; empty means uniform.
    pub class_probabilities: Vec<f64>,
    /// Draw tile classes without replacement (needs enough classes).
    pub distinct_tiles: bool,
    pub max_small_objects: usize,
    pub small_object_probability: f64,
    pub texture_amplitude: f64,
}

impl Default for MosaicSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            num_classes: 6,
            tiles_per_side: [2, 4],
            texture_seed: 0,
            class_palette: Vec::new(),
            class_probabilities: Vec::new(),
            distinct_tiles: false,
            max_small_objects: 2,
            small_object_probability: 0.5,
            texture_amplitude: 0.08,
        }
    }
}

impl MosaicSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.image_size >= 16, Config, "image_size must be >= 16");
        ensure!(
            (2..=255).contains(&self.num_classes),
            Config,
            "num_classes must be in [2, 255]"
        );
        let [lo, hi] = self.tiles_per_side;
        ensure!(lo >= 1 && lo <= hi, Config, "tiles_per_side range invalid");
        ensure!(hi <= self.image_size, Config, "more tiles than pixels per side");
        if self.distinct_tiles {
            ensure!(
                hi * hi <= self.num_classes,
                Config,
                "distinct_tiles needs tiles_per_side^2 <= num_classes"
            );
        }
        ensure!(
            self.class_palette.is_empty() || self.class_palette.len() == self.num_classes,
            Config,
            "class_palette must have one entry per class"
        );
        if !self.class_probabilities.is_empty() {
            ensure!(
                self.class_probabilities.len() == self.num_classes
                    && self.class_probabilities.iter().all(|p| p.is_finite() && *p >= 0.0)
                    && self.class_probabilities.iter().sum::<f64>() > 0.0,
                Config,
                "class_probabilities must be non-negative, one per class, not all zero"
            );
        }
        ensure!(
            (0.0..=1.0).contains(&self.small_object_probability),
            Config,
            "small_object_probability must be in [0, 1]"
        );
        Ok(())
    }

    /// Palette in effect: the configured one, or hues spread around the
    /// colour wheel with brightness alternating between classes.
    pub fn palette(&self) -> Vec<ClassColor> {
        if !self.class_palette.is_empty() {
            return self.class_palette.clone();
        }
        (0..self.num_classes)
            .map(|c| {
                let hue = c as f64 / self.num_classes as f64;
                let value = if c % 2 == 0 { 0.85 } else { 0.55 };
                ClassColor {
                    base: hsv_to_rgb(hue, 0.65, value),
                    noise: 0.06,
                }
            })
            .collect()
    }
}

pub(crate) fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

#[inline]
pub(crate) fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[inline]
pub(crate) fn dequantize_u8(q: u8) -> f64 {
    q as f64 / 255.0
}

/// Renders one labelled mosaic. Pixel values lie on the 8-bit grid so that
/// writing to PNG and reading back is lossless.
pub fn generate_mosaic(spec: &MosaicSpec, seed: u64) -> Result<ImagePatch> {
    spec.validate()?;
    let size = spec.image_size;
    let mut rng = rng::stream(seed, &[tag::MOSAIC]);

    let tiles = rng.gen_range(spec.tiles_per_side[0]..=spec.tiles_per_side[1]);
    let weights = if spec.class_probabilities.is_empty() {
        vec![1.0; spec.num_classes]
    } else {
        spec.class_probabilities.clone()
    };
    let tile_classes: Vec<u8> = if spec.distinct_tiles {
        let mut classes: Vec<u8> = (0..spec.num_classes as u8).collect();
        classes.shuffle(&mut rng);
        classes.truncate(tiles * tiles);
        classes
    } else {
        let dist = WeightedIndex::new(&weights)
            .map_err(|e| GrassError::Config(format!("class_probabilities: {e}")))?;
        (0..tiles * tiles).map(|_| dist.sample(&mut rng) as u8).collect()
    };

    let edges: Vec<usize> = (0..=tiles).map(|t| t * size / tiles).collect();
    let mut labels = vec![0u8; size * size];
    for ty in 0..tiles {
        for tx in 0..tiles {
            let class = tile_classes[ty * tiles + tx];
            for y in edges[ty]..edges[ty + 1] {
                labels[y * size + edges[tx]..y * size + edges[tx + 1]].fill(class);
            }
        }
    }

    if spec.max_small_objects > 0 && rng.gen_bool(spec.small_object_probability) {
        let count = rng.gen_range(1..=spec.max_small_objects);
        for _ in 0..count {
            let class = rng.gen_range(0..spec.num_classes) as u8;
            let cy = rng.gen_range(0.0..size as f64);
            let cx = rng.gen_range(0.0..size as f64);
            let ry = rng.gen_range(2.0..(size as f64 / 8.0).max(3.0));
            let rx = rng.gen_range(2.0..(size as f64 / 8.0).max(3.0));
            for y in 0..size {
                for x in 0..size {
                    let dy = (y as f64 + 0.5 - cy) / ry;
                    let dx = (x as f64 + 0.5 - cx) / rx;
                    if dy * dy + dx * dx <= 1.0 {
                        labels[y * size + x] = class;
                    }
                }
            }
        }
    }

    let palette = spec.palette();
    let mut tex_rng = rng::stream(spec.texture_seed, &[tag::PALETTE]);
    let textures: Vec<(f64, f64, f64)> = (0..spec.num_classes)
        .map(|_| {
            let angle: f64 = tex_rng.gen_range(0.0..std::f64::consts::PI);
            let freq: f64 = tex_rng.gen_range(0.2..1.2);
            let phase: f64 = tex_rng.gen_range(0.0..std::f64::consts::TAU);
            (angle, freq, phase)
        })
        .collect();

    let mut pixels = Tensor3::zeros(3, size, size);
    for y in 0..size {
        for x in 0..size {
            let class = labels[y * size + x] as usize;
            let color = &palette[class];
            let (angle, freq, phase) = textures[class];
            let wave = (freq * (x as f64 * angle.cos() + y as f64 * angle.sin()) + phase).sin();
            for (c, base) in color.base.iter().enumerate() {
                let noise = rng.gen_range(-1.0..=1.0) * color.noise;
                let v = base + noise + spec.texture_amplitude * wave;
                pixels.set(c, y, x, dequantize_u8(quantize_u8(v)));
            }
        }
    }

    ImagePatch::new(
        pixels,
        Some(Mask::new(size, size, labels)),
        format!("mosaic_{seed:08}"),
    )
}

/// Generates `count` mosaics with seeds `base_seed, base_seed + 1, ...`.
pub fn generate_dataset(spec: &MosaicSpec, count: usize, base_seed: u64) -> Result<Vec<ImagePatch>> {
    (0..count as u64)
        .map(|i| generate_mosaic(spec, base_seed.wrapping_add(i)))
        .collect()
}

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    pub with_masks: bool,
    /// Patches larger than this are centre-cropped; smaller ones rejected.
    pub crop_size: Option<usize>,
    pub num_classes: Option<usize>,
}

fn sorted_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| GrassError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    Ok(files)
}

fn find_mask(mask_dir: &Path, stem: &str) -> Option<PathBuf> {
    ["png", "tif", "tiff", "bmp"]
        .iter()
        .map(|ext| mask_dir.join(format!("{stem}.{ext}")))
        .find(|p| p.is_file())
}

/// Loads `images/` (and optionally `masks/`) under `root`, ordered by
/// filename.
pub fn load_dataset(root: &Path, opts: &LoadOptions) -> Result<Vec<ImagePatch>> {
    let image_dir = root.join("images");
    let mask_dir = root.join("masks");
    let mut out = Vec::new();
    for path in sorted_files(&image_dir)? {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| GrassError::Data(format!("unreadable file name {}", path.display())))?
            .to_string();
        let img = image::open(&path)
            .map_err(|source| GrassError::Image {
                path: path.clone(),
                source,
            })?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut pixels = Tensor3::zeros(3, h, w);
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                pixels.set(c, y as usize, x as usize, dequantize_u8(p[c]));
            }
        }
        let mask = if opts.with_masks {
            let mpath = find_mask(&mask_dir, &stem)
                .ok_or_else(|| GrassError::Data(format!("missing mask for image {stem}")))?;
            let m = image::open(&mpath)
                .map_err(|source| GrassError::Image {
                    path: mpath.clone(),
                    source,
                })?
                .to_luma8();
            ensure!(
                m.width() as usize == w && m.height() as usize == h,
                Data,
                "mask {} is {}x{}, image is {}x{}",
                mpath.display(),
                m.height(),
                m.width(),
                h,
                w
            );
            let labels = m.into_raw();
            if let Some(nc) = opts.num_classes {
                ensure!(
                    labels.iter().all(|&l| (l as usize) < nc),
                    Data,
                    "mask {} has class index >= {nc}",
                    mpath.display()
                );
            }
            Some(Mask::new(h, w, labels))
        } else {
            None
        };
        let mut patch = ImagePatch::new(pixels, mask, stem)?;
        if let Some(size) = opts.crop_size {
            patch = center_crop(patch, size)?;
        }
        out.push(patch);
    }
    ensure!(!out.is_empty(), Data, "no images found in {}", image_dir.display());
    Ok(out)
}

fn center_crop(patch: ImagePatch, size: usize) -> Result<ImagePatch> {
    let (h, w) = (patch.height(), patch.width());
    ensure!(
        h >= size && w >= size,
        Data,
        "image {} is {h}x{w}, smaller than crop size {size}",
        patch.source_id
    );
    if h == size && w == size {
        return Ok(patch);
    }
    let region = CropBox {
        x: (w - size) / 2,
        y: (h - size) / 2,
        h: size,
        w: size,
    };
    let pixels = crate::tensor::resize_bilinear_region(&patch.pixels, region, size, size);
    let mask = patch.mask.map(|m| m.crop_resize(region, size, size));
    ImagePatch::new(pixels, mask, patch.source_id)
}

/// Writes patches to `root/images/<id>.png` (+ `root/masks/<id>.png`).
pub fn save_dataset(root: &Path, patches: &[ImagePatch]) -> Result<()> {
    let image_dir = root.join("images");
    let mask_dir = root.join("masks");
    fs::create_dir_all(&image_dir).map_err(|e| GrassError::io(&image_dir, e))?;
    for p in patches {
        let (h, w) = (p.height(), p.width());
        let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            image::Rgb([0, 1, 2].map(|c| quantize_u8(p.pixels.get(c, y as usize, x as usize))))
        });
        let path = image_dir.join(format!("{}.png", p.source_id));
        img.save(&path).map_err(|source| GrassError::Image { path, source })?;
        if let Some(m) = &p.mask {
            fs::create_dir_all(&mask_dir).map_err(|e| GrassError::io(&mask_dir, e))?;
            let img = image::GrayImage::from_raw(w as u32, h as u32, m.labels.clone())
                .expect("mask buffer size");
            let path = mask_dir.join(format!("{}.png", p.source_id));
            img.save(&path).map_err(|source| GrassError::Image { path, source })?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plain(tiles: usize) -> MosaicSpec {
        MosaicSpec {
            tiles_per_side: [tiles, tiles],
            max_small_objects: 0,
            ..MosaicSpec::default()
        }
    }

    #[test]
    fn single_tile_has_one_class() {
        for seed in 0..20 {
            let p = generate_mosaic(&plain(1), seed).unwrap();
            assert_eq!(count_classes(p.mask.as_ref().unwrap()), 1);
        }
    }

    #[test]
    fn distinct_quad_layout_has_four_classes() {
        let spec = MosaicSpec {
            distinct_tiles: true,
            ..plain(2)
        };
        let p = generate_mosaic(&spec, 11).unwrap();
        assert_eq!(count_classes(p.mask.as_ref().unwrap()), 4);
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = MosaicSpec::default();
        assert_eq!(generate_mosaic(&spec, 7).unwrap(), generate_mosaic(&spec, 7).unwrap());
        assert_ne!(generate_mosaic(&spec, 7).unwrap(), generate_mosaic(&spec, 8).unwrap());
    }

    #[test]
    fn count_classes_examples() {
        assert_eq!(count_classes(&Mask::uniform(5, 5, 3)), 1);
        assert_eq!(count_classes(&Mask::uniform(1, 1, 0)), 1);
        // three vertical tiles with classes {0, 2, 5}
        let labels = (0..36).map(|i| [0u8, 2, 5][(i % 6) / 2]).collect();
        let mask = Mask::new(6, 6, labels);
        let mut brute: Vec<u8> = mask.labels.clone();
        brute.sort();
        brute.dedup();
        assert_eq!(count_classes(&mask), brute.len());
        assert_eq!(count_classes(&mask), 3);
    }

    #[test]
    fn invalid_specs_rejected() {
        for spec in [
            MosaicSpec { image_size: 8, ..MosaicSpec::default() },
            MosaicSpec { num_classes: 1, ..MosaicSpec::default() },
            MosaicSpec { tiles_per_side: [0, 2], ..MosaicSpec::default() },
            MosaicSpec { distinct_tiles: true, ..MosaicSpec::default() },
        ] {
            assert!(matches!(generate_mosaic(&spec, 0), Err(GrassError::Config(_))));
        }
    }

    #[test]
    fn imbalance_vector_is_respected() {
        let mut probs = vec![0.0; 6];
        probs[4] = 1.0;
        let spec = MosaicSpec {
            class_probabilities: probs,
            ..plain(3)
        };
        let p = generate_mosaic(&spec, 3).unwrap();
        assert!(p.mask.unwrap().labels.iter().all(|&l| l == 4));
    }

    #[test]
    fn disk_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let patches = generate_dataset(&MosaicSpec::default(), 3, 40).unwrap();
        save_dataset(dir.path(), &patches).unwrap();
        let opts = LoadOptions {
            with_masks: true,
            crop_size: Some(64),
            num_classes: Some(6),
        };
        let loaded = load_dataset(dir.path(), &opts).unwrap();
        assert_eq!(loaded, patches);
    }

    #[test]
    fn missing_mask_and_size_mismatch_are_data_errors() {
        let dir = tempfile::tempdir().unwrap();
        let patches = generate_dataset(&MosaicSpec::default(), 2, 0).unwrap();
        save_dataset(dir.path(), &patches).unwrap();
        fs::remove_file(dir.path().join("masks").join(format!("{}.png", patches[1].source_id)))
            .unwrap();
        let opts = LoadOptions {
            with_masks: true,
            ..LoadOptions::default()
        };
        assert!(matches!(load_dataset(dir.path(), &opts), Err(GrassError::Data(_))));

        let small = image::GrayImage::new(10, 10);
        small
            .save(dir.path().join("masks").join(format!("{}.png", patches[1].source_id)))
            .unwrap();
        assert!(matches!(load_dataset(dir.path(), &opts), Err(GrassError::Data(_))));

        let opts = LoadOptions {
            crop_size: Some(128),
            ..LoadOptions::default()
        };
        assert!(matches!(load_dataset(dir.path(), &opts), Err(GrassError::Data(_))));
    }

    proptest::proptest! {
        #[test]
        fn class_count_within_bounds(seed in 0u64..10_000, classes in 2usize..9) {
            let spec = MosaicSpec { num_classes: classes, ..MosaicSpec::default() };
            let p = generate_mosaic(&spec, seed).unwrap();
            let n = count_classes(p.mask.as_ref().unwrap());
            proptest::prop_assert!(n >= 1 && n <= classes);
            proptest::prop_assert!(p.pixels.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
