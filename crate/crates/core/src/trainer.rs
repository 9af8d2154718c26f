//! Two-stage pretraining loop: instance-discrimination warm-up, then
//! gradient-guided resampling with two loss computations per batch.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_batch, ViewBatch};
use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::contrastive::{batch_loss, LossOutput, Projections};
use crate::error::{ensure, GrassError, Result};
use crate::evalseg::{object_counts, ObjectCounts};
use crate::lamcore::{guided_resample, GuidedCrop};
use crate::model::{Model, Upstream};
use crate::optim::Sgd;
use crate::rng::{self, tag};
use crate::synthdata::ImagePatch;
use crate::tensor::Tensor3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Warmup,
    Guided,
}

impl Stage {
    /// Stage of 1-based epoch `epoch`.
    pub fn of(epoch: usize, warmup_epochs: usize) -> Self {
        if epoch > warmup_epochs {
            Stage::Guided
        } else {
            Stage::Warmup
        }
    }
}

/// One line of `runlog.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: Stage,
    /// Mean of the loss that drove each update.
    pub mean_loss: f64,
    /// Mean first-pass loss (guided epochs only).
    pub mean_pass1_loss: Option<f64>,
    pub batch_losses: Vec<f64>,
    /// Mean guided-crop area over view area (guided epochs only).
    pub mean_crop_area_fraction: Option<f64>,
    pub fallback_fraction: Option<f64>,
    /// Statistics of the first batch, when masks are present and
    /// observation is enabled.
    pub object_counts: Option<ObjectCounts>,
    pub param_hash: String,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model,
    pub optimizer: Sgd,
    /// Completed epochs.
    pub epoch: usize,
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.encoder.clone(), config.projector.clone(), config.seed)?;
        let optimizer = Sgd::new(config.optimizer.clone(), model.param_len());
        Ok(Self {
            model,
            optimizer,
            epoch: 0,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let (model, optimizer) = ckpt.restore()?;
        Ok(Self {
            model,
            optimizer,
            epoch: ckpt.header.epoch,
        })
    }
}

/// First pass of a guided batch: loss, gradient on the feature maps, and
/// the resampled views. Parameters are only read.
#[derive(Debug, Clone)]
pub struct GuidedPass {
    pub loss: f64,
    pub grads: Vec<Tensor3>,
    pub resampled: Vec<ImagePatch>,
    pub crops: Vec<GuidedCrop>,
}

fn loss_of(model: &Model, views: &[ImagePatch], n: usize, k: usize, config: &TrainConfig) -> Result<(crate::model::ForwardPass, LossOutput)> {
    let refs: Vec<&Tensor3> = views.iter().map(|v| &v.pixels).collect();
    let pass = model.forward(&refs)?;
    let out = batch_loss(&Projections::new(n, k, pass.projections())?, &config.loss)?;
    Ok((pass, out))
}

pub fn guided_pass1(model: &Model, views: &ViewBatch, config: &TrainConfig) -> Result<GuidedPass> {
    let (pass, out) = loss_of(model, &views.views, views.n, views.k, config)?;
    let grads = model.grad_wrt_feature(&pass, &Upstream::from_projection_grad(out.grad))?;
    let features: Vec<&Tensor3> = pass.features().collect();
    let (resampled, crops) = guided_resample(&views.views, &features, &grads, &config.guided())?;
    Ok(GuidedPass {
        loss: out.loss,
        grads,
        resampled,
        crops,
    })
}

/// Forward, loss, backward and one optimizer step on `views`.
pub fn update_step(state: &mut TrainState, views: &[ImagePatch], n: usize, k: usize, config: &TrainConfig) -> Result<f64> {
    let (pass, out) = loss_of(&state.model, views, n, k, config)?;
    if !out.loss.is_finite() {
        return Ok(out.loss);
    }
    let grad = state
        .model
        .param_grad(&pass, &Upstream::from_projection_grad(out.grad))?;
    state.optimizer.step(state.model.params_mut(), &grad);
    Ok(out.loss)
}

/// Batches of epoch `epoch`: a seeded permutation cut into `batch_size`
/// chunks; a trailing chunk of one image is dropped.
pub fn epoch_batches(len: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng::stream(seed, &[tag::SHUFFLE, epoch as u64]));
    order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

pub fn augment_key(config: &TrainConfig, epoch: usize, batch: usize) -> u64 {
    rng::derive_key(config.seed, &[tag::AUGMENT, config.augment.seed, epoch as u64, batch as u64])
}

pub fn train_epoch_warmup(state: &mut TrainState, config: &TrainConfig, data: &[ImagePatch]) -> Result<EpochRecord> {
    train_epoch(state, config, data, Stage::Warmup, false)
}

pub fn train_epoch_guided(state: &mut TrainState, config: &TrainConfig, data: &[ImagePatch]) -> Result<EpochRecord> {
    train_epoch(state, config, data, Stage::Guided, false)
}

/// Runs epoch `state.epoch + 1` in whichever stage it belongs to.
/// `observe` records object-count statistics of the first batch.
pub fn train_next_epoch(state: &mut TrainState, config: &TrainConfig, data: &[ImagePatch], observe: bool) -> Result<EpochRecord> {
    let stage = Stage::of(state.epoch + 1, config.warmup_epochs);
    train_epoch(state, config, data, stage, observe)
}

fn train_epoch(
    state: &mut TrainState,
    config: &TrainConfig,
    data: &[ImagePatch],
    stage: Stage,
    observe: bool,
) -> Result<EpochRecord> {
    let epoch = state.epoch + 1;
    let expected = Stage::of(epoch, config.warmup_epochs);
    ensure!(
        stage == expected,
        Usage,
        "epoch {epoch} belongs to the {expected:?} stage (warm-up = {})",
        config.warmup_epochs
    );
    ensure!(data.len() >= 2, Data, "training needs at least two images (got {})", data.len());
    let start = Instant::now();
    let batches = epoch_batches(data.len(), config.batch_size, config.seed, epoch);
    let mut losses = Vec::with_capacity(batches.len());
    let mut pass1 = Vec::new();
    let (mut area, mut fallbacks, mut crop_count) = (0.0, 0usize, 0usize);
    let mut counts = None;

    for (b, idx) in batches.iter().enumerate() {
        let sources: Vec<ImagePatch> = idx.iter().map(|&i| data[i].clone()).collect();
        let views = augment_batch(&sources, &config.augment, augment_key(config, epoch, b))?;
        let watch = observe && b == 0;
        let loss = match stage {
            Stage::Warmup => {
                if watch {
                    let g = guided_pass1(&state.model, &views, config)?;
                    let boxes: Vec<_> = g.crops.iter().map(|c| c.crop).collect();
                    counts = object_counts(&sources, &views, &boxes);
                }
                update_step(state, &views.views, views.n, views.k, config)?
            }
            Stage::Guided => {
                let g = guided_pass1(&state.model, &views, config)?;
                check_finite(g.loss, epoch, b, "first pass")?;
                pass1.push(g.loss);
                for (c, v) in g.crops.iter().zip(&views.views) {
                    area += c.crop.area() as f64 / (v.height() * v.width()) as f64;
                    fallbacks += usize::from(c.fallback);
                }
                crop_count += g.crops.len();
                if watch {
                    let boxes: Vec<_> = g.crops.iter().map(|c| c.crop).collect();
                    counts = object_counts(&sources, &views, &boxes);
                }
                update_step(state, &g.resampled, views.n, views.k, config)?
            }
        };
        check_finite(loss, epoch, b, "update pass")?;
        losses.push(loss);
    }
    state.epoch = epoch;

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(EpochRecord {
        epoch,
        stage,
        mean_loss: mean(&losses),
        mean_pass1_loss: (!pass1.is_empty()).then(|| mean(&pass1)),
        mean_crop_area_fraction: (crop_count > 0).then(|| area / crop_count as f64),
        fallback_fraction: (crop_count > 0).then(|| fallbacks as f64 / crop_count as f64),
        batch_losses: losses,
        object_counts: counts,
        param_hash: state.model.param_hash(),
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

fn check_finite(loss: f64, epoch: usize, batch: usize, what: &str) -> Result<()> {
    ensure!(
        loss.is_finite(),
        Numeric,
        "non-finite loss ({loss}) in {what} at epoch {epoch}, batch {batch}; lower the learning rate or check the input data"
    );
    Ok(())
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Checkpoints and `runlog.jsonl` go here; nothing is written if unset.
    pub out_dir: Option<PathBuf>,
    pub resume: Option<Checkpoint>,
    /// Record object-count statistics of the first batch of every epoch.
    pub observe: bool,
    /// Stop after this epoch instead of `total_epochs`.
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub state: TrainState,
    /// Records of the epochs run by this call.
    pub log: Vec<EpochRecord>,
    pub final_checkpoint: Option<PathBuf>,
}

pub const RUNLOG_FILE: &str = "runlog.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub fn checkpoint_path(out_dir: &Path, epoch: usize) -> PathBuf {
    out_dir.join("checkpoints").join(format!("epoch_{epoch:04}.ckpt"))
}

pub fn read_runlog(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = fs::read_to_string(path).map_err(|e| GrassError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| GrassError::Data(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

pub fn run(config: &TrainConfig, data: &[ImagePatch], opts: &RunOptions) -> Result<RunOutcome> {
    config.validate()?;
    if config.reference_mode {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .map_err(|e| GrassError::Usage(format!("thread pool: {e}")))?;
        pool.install(|| run_inner(config, data, opts))
    } else {
        run_inner(config, data, opts)
    }
}

fn run_inner(config: &TrainConfig, data: &[ImagePatch], opts: &RunOptions) -> Result<RunOutcome> {
    let mut state = match &opts.resume {
        Some(ckpt) => {
            ensure!(
                &ckpt.header.config == config,
                Config,
                "checkpoint was written with a different training config"
            );
            TrainState::from_checkpoint(ckpt)?
        }
        None => TrainState::new(config)?,
    };
    let last = opts.stop_after.unwrap_or(config.total_epochs).min(config.total_epochs);
    let mut runlog = match &opts.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir.join("checkpoints")).map_err(|e| GrassError::io(dir, e))?;
            let path = dir.join(RUNLOG_FILE);
            let file = OpenOptions::new()
                .create(true)
                .append(opts.resume.is_some())
                .write(true)
                .truncate(opts.resume.is_none())
                .open(&path)
                .map_err(|e| GrassError::io(&path, e))?;
            Some((path, file))
        }
        None => None,
    };

    let mut log = Vec::new();
    let mut final_checkpoint = None;
    while state.epoch < last {
        let record = train_next_epoch(&mut state, config, data, opts.observe)?;
        if let Some((path, file)) = runlog.as_mut() {
            let line = serde_json::to_string(&record).map_err(|e| GrassError::Data(e.to_string()))?;
            writeln!(file, "{line}").map_err(|e| GrassError::io(path.as_path(), e))?;
        }
        log.push(record);
        if let Some(dir) = &opts.out_dir {
            let e = state.epoch;
            let periodic = config.checkpoint_every > 0 && e % config.checkpoint_every == 0;
            if periodic || e == last {
                let ckpt = Checkpoint::capture(config, e, &state.model, &state.optimizer);
                ckpt.save(&checkpoint_path(dir, e))?;
                if e == config.total_epochs {
                    let p = dir.join(FINAL_CHECKPOINT);
                    ckpt.save(&p)?;
                    final_checkpoint = Some(p);
                }
            }
        }
    }
    Ok(RunOutcome {
        state,
        log,
        final_checkpoint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EncoderSpec;
    use crate::synthdata::{generate_dataset, MosaicSpec};

    fn small_config() -> TrainConfig {
        TrainConfig {
            total_epochs: 3,
            warmup_epochs: 1,
            batch_size: 4,
            checkpoint_every: 1,
            encoder: EncoderSpec {
                widths: vec![4, 8],
                feature_dim: 8,
                stride: 4,
                ..EncoderSpec::default()
            },
            ..TrainConfig::toy()
        }
    }

    fn data(n: usize) -> Vec<ImagePatch> {
        let spec = MosaicSpec {
            image_size: 32,
            ..MosaicSpec::default()
        };
        generate_dataset(&spec, n, 11).unwrap()
    }

    #[test]
    fn stage_switch() {
        assert_eq!(Stage::of(1, 0), Stage::Guided);
        assert_eq!(Stage::of(150, 150), Stage::Warmup);
        assert_eq!(Stage::of(151, 150), Stage::Guided);
    }

    #[test]
    fn batches_cover_data_and_drop_singletons() {
        let b = epoch_batches(9, 4, 0, 1);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4]);
        let b = epoch_batches(10, 4, 0, 1);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_ne!(epoch_batches(10, 4, 0, 1), epoch_batches(10, 4, 0, 2));
    }

    #[test]
    fn pass1_leaves_parameters_untouched() {
        let cfg = small_config();
        let state = TrainState::new(&cfg).unwrap();
        let views = augment_batch(&data(4), &cfg.augment, 3).unwrap();
        let before = state.model.param_hash();
        let g = guided_pass1(&state.model, &views, &cfg).unwrap();
        assert_eq!(state.model.param_hash(), before);
        assert_eq!(g.resampled.len(), 8);
        assert!(g.loss.is_finite());
    }

    #[test]
    fn wrong_stage_is_rejected() {
        let cfg = small_config();
        let mut state = TrainState::new(&cfg).unwrap();
        assert!(matches!(
            train_epoch_guided(&mut state, &cfg, &data(4)),
            Err(GrassError::Usage(_))
        ));
        train_epoch_warmup(&mut state, &cfg, &data(4)).unwrap();
        assert!(train_epoch_warmup(&mut state, &cfg, &data(4)).is_err());
    }

    #[test]
    fn run_writes_log_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config();
        let out = run(
            &cfg,
            &data(8),
            &RunOptions {
                out_dir: Some(dir.path().into()),
                observe: true,
                ..RunOptions::default()
            },
        )
        .unwrap();
        let log = read_runlog(&dir.path().join(RUNLOG_FILE)).unwrap();
        assert_eq!(log, out.log);
        let stages: Vec<Stage> = log.iter().map(|r| r.stage).collect();
        assert_eq!(stages, vec![Stage::Warmup, Stage::Guided, Stage::Guided]);
        assert!(log[0].mean_pass1_loss.is_none());
        assert!(log[1].mean_crop_area_fraction.unwrap() <= 1.0);
        assert!(log.iter().all(|r| r.object_counts.is_some()));
        assert!(checkpoint_path(dir.path(), 2).exists());
        let fin = Checkpoint::load(&out.final_checkpoint.unwrap()).unwrap();
        assert_eq!(fin.header.param_hash, out.state.model.param_hash());
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let cfg = small_config();
        let d = data(8);
        let full = run(&cfg, &d, &RunOptions::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        run(
            &cfg,
            &d,
            &RunOptions {
                out_dir: Some(dir.path().into()),
                stop_after: Some(1),
                ..RunOptions::default()
            },
        )
        .unwrap();
        let ckpt = Checkpoint::load(&checkpoint_path(dir.path(), 1)).unwrap();
        let resumed = run(
            &cfg,
            &d,
            &RunOptions {
                resume: Some(ckpt),
                ..RunOptions::default()
            },
        )
        .unwrap();
        for (a, b) in full.log[1..].iter().zip(&resumed.log) {
            assert_eq!(a.batch_losses, b.batch_losses);
            assert_eq!(a.param_hash, b.param_hash);
        }
    }

    #[test]
    fn resume_with_other_config_is_refused() {
        let cfg = small_config();
        let state = TrainState::new(&cfg).unwrap();
        let ckpt = Checkpoint::capture(&cfg, 0, &state.model, &state.optimizer);
        let other = TrainConfig {
            threshold: 0.7,
            ..cfg
        };
        let r = run(
            &other,
            &data(4),
            &RunOptions {
                resume: Some(ckpt),
                ..RunOptions::default()
            },
        );
        assert!(matches!(r, Err(GrassError::Config(_))));
    }

    #[test]
    fn divergent_learning_rate_aborts() {
        let mut cfg = small_config();
        cfg.optimizer.learning_rate = 1e200;
        cfg.total_epochs = 3;
        let r = run(&cfg, &data(8), &RunOptions::default());
        assert!(matches!(r, Err(GrassError::Numeric(_)) | Err(GrassError::Model(_))), "{r:?}");
    }
}
