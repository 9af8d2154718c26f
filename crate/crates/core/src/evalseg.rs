//! Frozen-encoder segmentation fine-tuning, confusion-matrix metrics and
//! the per-sample object-count analysis.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::ViewBatch;
use crate::checkpoint::Container;
use crate::config::FinetuneConfig;
use crate::error::{ensure, GrassError, Result};
use crate::model::Model;
use crate::nn::{relu, relu_backward, Conv2d, ParamStore};
use crate::optim::Sgd;
use crate::rng::{self, tag};
use crate::synthdata::{count_classes, ImagePatch};
use crate::tensor::{resize_bilinear, resize_bilinear_backward, CropBox, Tensor3};

/// Pixel counts indexed `[ground_truth][prediction]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    #[inline]
    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn add(&mut self, truth: &[u8], pred: &[u8]) -> Result<()> {
        ensure!(truth.len() == pred.len(), Data, "prediction/target size mismatch");
        let nc = self.num_classes;
        for (&t, &p) in truth.iter().zip(pred) {
            let (t, p) = (t as usize, p as usize);
            ensure!(t < nc && p < nc, Config, "class index outside [0, {nc})");
            self.counts[t * nc + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.num_classes, other.num_classes);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        (0..self.num_classes).map(|p| self.get(c, p)).sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        (0..self.num_classes).map(|t| self.get(t, c)).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    /// `None` where the class is absent from both prediction and target.
    pub iou: Vec<Option<f64>>,
    /// `None` where the class has no ground-truth pixels.
    pub acc: Vec<Option<f64>>,
    pub miou: f64,
    pub oa: f64,
    pub macc: f64,
}

impl SegMetrics {
    /// CSV with one row per class and the summary line appended.
    pub fn to_table(&self, class_names: Option<&[String]>) -> String {
        let mut s = String::from("class,iou,acc\n");
        let fmt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |x| format!("{x:.6}"));
        for c in 0..self.iou.len() {
            let name = class_names
                .and_then(|n| n.get(c).cloned())
                .unwrap_or_else(|| format!("class_{c}"));
            let _ = writeln!(s, "{name},{},{}", fmt(self.iou[c]), fmt(self.acc[c]));
        }
        s
    }

    /// `OA / mIoU / mAcc` in percent.
    pub fn summary_line(&self) -> String {
        format!(
            "OA / mIoU / mAcc: {:.2} / {:.2} / {:.2}",
            self.oa * 100.0,
            self.miou * 100.0,
            self.macc * 100.0
        )
    }
}

pub fn metrics_from_confusion(cm: &ConfusionMatrix) -> Result<SegMetrics> {
    let total = cm.total();
    if total == 0 {
        return Err(GrassError::UndefinedMetrics("confusion matrix is empty".into()));
    }
    let nc = cm.num_classes;
    let mut iou = Vec::with_capacity(nc);
    let mut acc = Vec::with_capacity(nc);
    let mut diag = 0u64;
    for c in 0..nc {
        let tp = cm.get(c, c);
        let (row, col) = (cm.row_sum(c), cm.col_sum(c));
        diag += tp;
        let union = row + col - tp;
        iou.push((union > 0).then(|| tp as f64 / union as f64));
        acc.push((row > 0).then(|| tp as f64 / row as f64));
    }
    let mean = |v: &[Option<f64>]| {
        let present: Vec<f64> = v.iter().flatten().copied().collect();
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok(SegMetrics {
        miou: mean(&iou),
        macc: mean(&acc),
        oa: diag as f64 / total as f64,
        iou,
        acc,
    })
}

/// Light upsampling head: 3×3 conv + ReLU, 1×1 conv to class logits,
/// bilinear upsampling to the input size.
#[derive(Debug, Clone, PartialEq)]
pub struct SegDecoder {
    pub feature_dim: usize,
    pub hidden: usize,
    pub num_classes: usize,
    params: ParamStore,
    conv1: Conv2d,
    conv2: Conv2d,
}

struct DecoderTrace {
    hidden: Tensor3,
    logits: Tensor3,
}

impl SegDecoder {
    pub const KIND: &'static str = "grass-decoder";

    pub fn new(feature_dim: usize, hidden: usize, num_classes: usize, seed: u64) -> Self {
        let mut store = ParamStore::default();
        let w1 = store.alloc("dec.conv1.weight", hidden * feature_dim * 9);
        let b1 = store.alloc("dec.conv1.bias", hidden);
        let w2 = store.alloc("dec.conv2.weight", num_classes * hidden);
        let b2 = store.alloc("dec.conv2.bias", num_classes);
        let mut rng = rng::stream(seed, &[tag::DECODER]);
        store.init_he(w1.clone(), feature_dim * 9, &mut rng);
        store.init_he(w2.clone(), hidden, &mut rng);
        Self {
            feature_dim,
            hidden,
            num_classes,
            conv1: Conv2d {
                in_ch: feature_dim,
                out_ch: hidden,
                kernel: 3,
                stride: 1,
                padding: 1,
                weight: w1,
                bias: Some(b1),
            },
            conv2: Conv2d {
                in_ch: hidden,
                out_ch: num_classes,
                kernel: 1,
                stride: 1,
                padding: 0,
                weight: w2,
                bias: Some(b2),
            },
            params: store,
        }
    }

    pub fn params(&self) -> &[f64] {
        &self.params.data
    }

    fn trace(&self, features: &Tensor3) -> DecoderTrace {
        let mut hidden = self.conv1.forward(&self.params.data, features);
        relu(&mut hidden);
        let logits = self.conv2.forward(&self.params.data, &hidden);
        DecoderTrace { hidden, logits }
    }

    /// Per-pixel class logits at `out_h × out_w`.
    pub fn logits(&self, features: &Tensor3, out_h: usize, out_w: usize) -> Tensor3 {
        resize_bilinear(&self.trace(features).logits, out_h, out_w)
    }

    pub fn predict(&self, features: &Tensor3, out_h: usize, out_w: usize) -> Vec<u8> {
        argmax_channels(&self.logits(features, out_h, out_w))
    }

    /// Summed cross-entropy over the pixels of one sample and its
    /// parameter gradient, both scaled by `scale`.
    fn loss_and_grad(&self, features: &Tensor3, labels: &[u8], out_hw: (usize, usize), scale: f64, grad: &mut [f64]) -> f64 {
        let tr = self.trace(features);
        let up = resize_bilinear(&tr.logits, out_hw.0, out_hw.1);
        let n = up.plane_len();
        let mut d_up = Tensor3::zeros(up.channels, up.height, up.width);
        let mut loss = 0.0;
        for (p, &label) in labels.iter().enumerate().take(n) {
            let max = (0..up.channels).map(|c| up.data[c * n + p]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..up.channels).map(|c| (up.data[c * n + p] - max).exp()).sum();
            loss += z.ln() + max - up.data[label as usize * n + p];
            for c in 0..up.channels {
                let prob = (up.data[c * n + p] - max).exp() / z;
                d_up.data[c * n + p] = scale * (prob - if c == label as usize { 1.0 } else { 0.0 });
            }
        }
        let d_logits = resize_bilinear_backward(&d_up, tr.logits.height, tr.logits.width);
        let p = &self.params.data;
        let mut d_hidden = self
            .conv2
            .backward(p, &tr.hidden, &d_logits, Some(grad), true)
            .expect("dx requested");
        relu_backward(&tr.hidden, &mut d_hidden);
        self.conv1.backward(p, features, &d_hidden, Some(grad), false);
        loss * scale
    }

    pub fn to_container(&self, encoder_hash: &str) -> Container {
        Container {
            header: serde_json::json!({
                "kind": Self::KIND,
                "feature_dim": self.feature_dim,
                "hidden": self.hidden,
                "num_classes": self.num_classes,
                "encoder_hash": encoder_hash,
            }),
            arrays: vec![self.params.data.clone()],
        }
    }

    /// Returns the decoder and the encoder hash it was trained against.
    pub fn from_container(c: &Container) -> Result<(Self, String)> {
        let h = &c.header;
        ensure!(
            h["kind"].as_str() == Some(Self::KIND),
            Checkpoint,
            "not a decoder file"
        );
        let field = |k: &str| {
            h[k].as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| GrassError::Checkpoint(format!("decoder header lacks {k}")))
        };
        let mut dec = Self::new(field("feature_dim")?, field("hidden")?, field("num_classes")?, 0);
        ensure!(
            c.arrays.len() == 1 && c.arrays[0].len() == dec.params.len(),
            Checkpoint,
            "decoder parameter count mismatch"
        );
        dec.params.data.copy_from_slice(&c.arrays[0]);
        let hash = h["encoder_hash"].as_str().unwrap_or_default().to_string();
        Ok((dec, hash))
    }

    pub fn save(&self, path: &Path, encoder_hash: &str) -> Result<()> {
        self.to_container(encoder_hash).save(path)
    }
}

fn argmax_channels(t: &Tensor3) -> Vec<u8> {
    let n = t.plane_len();
    (0..n)
        .map(|p| {
            let mut best = 0;
            for c in 1..t.channels {
                if t.data[c * n + p] > t.data[best * n + p] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

/// Frozen encoder plus trained decoder.
#[derive(Debug, Clone)]
pub struct SegmentationModel {
    pub encoder: Model,
    pub decoder: SegDecoder,
}

impl SegmentationModel {
    pub fn new(encoder: Model, decoder: SegDecoder) -> Result<Self> {
        ensure!(
            encoder.encoder_spec.feature_dim == decoder.feature_dim,
            Config,
            "decoder expects {} feature channels, encoder produces {}",
            decoder.feature_dim,
            encoder.encoder_spec.feature_dim
        );
        Ok(Self { encoder, decoder })
    }

    pub fn predict(&self, image: &Tensor3) -> Result<Vec<u8>> {
        let f = self.encoder.encode(image)?;
        Ok(self.decoder.predict(&f, image.height, image.width))
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub model: SegmentationModel,
    pub subset: Vec<String>,
    pub epoch_losses: Vec<f64>,
    pub encoder_hash_before: String,
    pub encoder_hash_after: String,
}

/// Seeded subset of `count` indices out of `len`; the choice depends only
/// on `(seed, len, count)`.
pub fn select_subset(len: usize, fraction: f64, min: usize, seed: u64) -> Vec<usize> {
    let count = ((len as f64 * fraction).round() as usize).max(min).min(len);
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut rng::stream(seed, &[tag::SUBSET, len as u64]));
    idx.truncate(count);
    idx.sort_unstable();
    idx
}

/// Trains only the decoder on top of the frozen `encoder`.
pub fn finetune(
    encoder: &Model,
    labeled: &[ImagePatch],
    num_classes: usize,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    ensure!(!labeled.is_empty(), Data, "no labelled images for fine-tuning");
    ensure!((2..=255).contains(&num_classes), Config, "num_classes must be in [2, 255]");
    let before = encoder.encoder_hash();
    let subset = select_subset(labeled.len(), cfg.label_fraction, cfg.min_labeled, seed);
    let mut samples = Vec::with_capacity(subset.len());
    for &i in &subset {
        let p = &labeled[i];
        let mask = p
            .mask
            .as_ref()
            .ok_or_else(|| GrassError::Data(format!("image {} has no mask", p.source_id)))?;
        ensure!(
            mask.labels.iter().all(|&l| (l as usize) < num_classes),
            Config,
            "mask of {} has classes outside the decoder's {num_classes}",
            p.source_id
        );
        samples.push((encoder.encode(&p.pixels)?, mask.labels.clone(), (p.height(), p.width())));
    }

    let mut decoder = SegDecoder::new(encoder.encoder_spec.feature_dim, cfg.decoder_hidden, num_classes, seed);
    let mut opt = Sgd::new(cfg.optimizer.clone(), decoder.params.len());
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::stream(seed, &[tag::DECODER, epoch as u64]));
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let pixels: usize = chunk.iter().map(|&i| samples[i].1.len()).sum();
            let scale = 1.0 / pixels as f64;
            let per_sample: Vec<(f64, Vec<f64>)> = chunk
                .par_iter()
                .map(|&i| {
                    let (f, labels, hw) = &samples[i];
                    let mut g = vec![0.0; decoder.params.len()];
                    let l = decoder.loss_and_grad(f, labels, *hw, scale, &mut g);
                    (l, g)
                })
                .collect();
            let mut grad = vec![0.0; decoder.params.len()];
            for (l, g) in per_sample {
                epoch_loss += l * chunk.len() as f64;
                for (a, b) in grad.iter_mut().zip(g) {
                    *a += b;
                }
            }
            ensure!(epoch_loss.is_finite(), Numeric, "non-finite decoder loss at epoch {epoch}");
            opt.step(&mut decoder.params.data, &grad);
        }
        epoch_losses.push(epoch_loss / samples.len() as f64);
    }
    let after = encoder.encoder_hash();
    ensure!(before == after, Model, "encoder parameters changed during fine-tuning");
    Ok(FinetuneOutcome {
        model: SegmentationModel::new(encoder.clone(), decoder)?,
        subset: subset.iter().map(|&i| labeled[i].source_id.clone()).collect(),
        epoch_losses,
        encoder_hash_before: before,
        encoder_hash_after: after,
    })
}

/// One confusion matrix accumulated over every test pixel.
pub fn evaluate(model: &SegmentationModel, test: &[ImagePatch]) -> Result<(ConfusionMatrix, SegMetrics)> {
    let nc = model.decoder.num_classes;
    let parts: Vec<Result<ConfusionMatrix>> = test
        .par_iter()
        .map(|p| {
            let mask = p
                .mask
                .as_ref()
                .ok_or_else(|| GrassError::Data(format!("test image {} has no mask", p.source_id)))?;
            let pred = model.predict(&p.pixels)?;
            let mut cm = ConfusionMatrix::new(nc);
            cm.add(&mask.labels, &pred)?;
            Ok(cm)
        })
        .collect();
    let mut cm = ConfusionMatrix::new(nc);
    for part in parts {
        cm.merge(&part?);
    }
    let metrics = metrics_from_confusion(&cm)?;
    Ok((cm, metrics))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmStats {
    pub samples: usize,
    /// Mean number of distinct classes per sample.
    pub mean_classes: f64,
    pub single_class: usize,
}

impl ArmStats {
    fn from_counts(counts: &[usize]) -> Self {
        Self {
            samples: counts.len(),
            mean_classes: counts.iter().sum::<usize>() as f64 / counts.len().max(1) as f64,
            single_class: counts.iter().filter(|&&c| c == 1).count(),
        }
    }
}

/// Distinct-class statistics for the original patches, their random
/// resized crops, and the gradient-guided crops of those views.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectCounts {
    pub original: ArmStats,
    pub random_crop: ArmStats,
    pub guided_crop: ArmStats,
}

/// `None` when any mask is missing.
pub fn object_counts(sources: &[ImagePatch], views: &ViewBatch, crops: &[CropBox]) -> Option<ObjectCounts> {
    if crops.len() != views.len() {
        return None;
    }
    let original: Vec<usize> = sources
        .iter()
        .map(|p| p.mask.as_ref().map(count_classes))
        .collect::<Option<_>>()?;
    let random: Vec<usize> = views
        .views
        .iter()
        .map(|v| v.mask.as_ref().map(count_classes))
        .collect::<Option<_>>()?;
    let guided: Vec<usize> = views
        .views
        .iter()
        .zip(crops)
        .map(|(v, c)| {
            v.mask
                .as_ref()
                .map(|m| count_classes(&m.crop_resize(*c, m.height, m.width)))
        })
        .collect::<Option<_>>()?;
    Some(ObjectCounts {
        original: ArmStats::from_counts(&original),
        random_crop: ArmStats::from_counts(&random),
        guided_crop: ArmStats::from_counts(&guided),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::{augment_batch, AugmentConfig};
    use crate::synthdata::{generate_dataset, Mask, MosaicSpec};

    #[test]
    fn perfect_prediction() {
        let gt: Vec<u8> = vec![0, 1, 2, 2, 1, 0];
        let mut cm = ConfusionMatrix::new(3);
        cm.add(&gt, &gt).unwrap();
        let m = metrics_from_confusion(&cm).unwrap();
        assert_eq!((m.miou, m.oa, m.macc), (1.0, 1.0, 1.0));
    }

    #[test]
    fn two_by_two_hand_example() {
        // GT = [A, A; B, B], pred = [A, B; B, B]
        let mut cm = ConfusionMatrix::new(2);
        cm.add(&[0, 0, 1, 1], &[0, 1, 1, 1]).unwrap();
        assert_eq!(cm.counts, vec![1, 1, 0, 2]);
        let m = metrics_from_confusion(&cm).unwrap();
        assert_eq!(m.iou, vec![Some(0.5), Some(2.0 / 3.0)]);
        assert!((m.miou - 7.0 / 12.0).abs() < 1e-15);
        assert_eq!(m.oa, 0.75);
        assert_eq!(m.acc, vec![Some(0.5), Some(1.0)]);
        assert_eq!(m.macc, 0.75);
    }

    #[test]
    fn disjoint_prediction_scores_zero() {
        let mut cm = ConfusionMatrix::new(2);
        cm.add(&[0, 0, 1, 1], &[1, 1, 0, 0]).unwrap();
        let m = metrics_from_confusion(&cm).unwrap();
        assert_eq!((m.miou, m.oa), (0.0, 0.0));
    }

    #[test]
    fn absent_classes_are_excluded() {
        let mut cm = ConfusionMatrix::new(4);
        cm.add(&[0, 1], &[0, 1]).unwrap();
        let m = metrics_from_confusion(&cm).unwrap();
        assert_eq!(m.iou[2], None);
        assert_eq!(m.miou, 1.0);
    }

    #[test]
    fn empty_matrix_is_undefined() {
        assert!(matches!(
            metrics_from_confusion(&ConfusionMatrix::new(3)),
            Err(GrassError::UndefinedMetrics(_))
        ));
    }

    #[test]
    fn out_of_range_class_is_rejected() {
        let mut cm = ConfusionMatrix::new(2);
        assert!(cm.add(&[0, 2], &[0, 0]).is_err());
    }

    #[test]
    fn table_layout() {
        let mut cm = ConfusionMatrix::new(2);
        cm.add(&[0, 0, 1, 1], &[0, 1, 1, 1]).unwrap();
        let m = metrics_from_confusion(&cm).unwrap();
        let t = m.to_table(None);
        assert!(t.starts_with("class,iou,acc\nclass_0,0.500000,0.500000\n"));
        assert_eq!(m.summary_line(), "OA / mIoU / mAcc: 75.00 / 58.33 / 75.00");
    }

    #[test]
    fn decoder_gradient_matches_finite_differences() {
        let dec = SegDecoder::new(3, 4, 3, 1);
        let f = Tensor3::from_vec(3, 2, 2, (0..12).map(|i| (i as f64 * 0.3).sin()).collect());
        let labels: Vec<u8> = (0..16).map(|i| (i % 3) as u8).collect();
        let mut g = vec![0.0; dec.params.len()];
        dec.loss_and_grad(&f, &labels, (4, 4), 1.0, &mut g);
        let eps = 1e-6;
        for i in 0..dec.params.len() {
            let mut d = dec.clone();
            d.params.data[i] += eps;
            let mut scratch = vec![0.0; g.len()];
            let up = d.loss_and_grad(&f, &labels, (4, 4), 1.0, &mut scratch);
            d.params.data[i] -= 2.0 * eps;
            let down = d.loss_and_grad(&f, &labels, (4, 4), 1.0, &mut scratch);
            assert!(((up - down) / (2.0 * eps) - g[i]).abs() < 1e-6, "param {i}");
        }
    }

    #[test]
    fn decoder_container_round_trip() {
        let dec = SegDecoder::new(8, 5, 4, 9);
        let (back, hash) = SegDecoder::from_container(&dec.to_container("abc")).unwrap();
        assert_eq!(back, dec);
        assert_eq!(hash, "abc");
    }

    #[test]
    fn subset_selection_is_seeded() {
        let a = select_subset(1000, 0.01, 1, 4);
        assert_eq!(a.len(), 10);
        assert_eq!(a, select_subset(1000, 0.01, 1, 4));
        assert_ne!(a, select_subset(1000, 0.01, 1, 5));
        assert_eq!(select_subset(20, 0.01, 1, 4).len(), 1);
    }

    #[test]
    fn object_counts_for_single_class_patches() {
        let spec = MosaicSpec {
            tiles_per_side: [1, 1],
            max_small_objects: 0,
            ..MosaicSpec::default()
        };
        let batch = generate_dataset(&spec, 4, 0).unwrap();
        let views = augment_batch(&batch, &AugmentConfig::default(), 1).unwrap();
        let crops = vec![CropBox::full(64, 64); views.len()];
        let c = object_counts(&batch, &views, &crops).unwrap();
        assert_eq!(c.original.mean_classes, 1.0);
        assert_eq!(c.original.single_class, 4);
        assert_eq!(c.guided_crop.single_class, 8);
    }

    #[test]
    fn crop_inside_one_tile_counts_one_class() {
        let spec = MosaicSpec {
            tiles_per_side: [2, 2],
            distinct_tiles: true,
            max_small_objects: 0,
            ..MosaicSpec::default()
        };
        let batch = generate_dataset(&spec, 2, 0).unwrap();
        let views = augment_batch(&batch, &AugmentConfig::identity(2), 1).unwrap();
        let crops = vec![CropBox { x: 36, y: 4, h: 20, w: 20 }; views.len()];
        let c = object_counts(&batch, &views, &crops).unwrap();
        assert_eq!(c.original.mean_classes, 4.0);
        assert_eq!(c.guided_crop.mean_classes, 1.0);
        assert_eq!(c.guided_crop.single_class, 4);
        let no_mask: Vec<ImagePatch> = batch
            .iter()
            .map(|p| ImagePatch { mask: None, ..p.clone() })
            .collect();
        assert!(object_counts(&no_mask, &views, &crops).is_none());
        let _ = Mask::uniform(1, 1, 0);
    }
}
