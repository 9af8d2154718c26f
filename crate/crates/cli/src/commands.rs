use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, ensure, Context, Result};
use serde::Serialize;

use grass_core::augment::augment_batch;
use grass_core::checkpoint::{Checkpoint, Container};
use grass_core::config::{ExperimentConfig, TrainConfig};
use grass_core::evalseg::{evaluate, finetune, ConfusionMatrix, SegDecoder, SegMetrics, SegmentationModel};
use grass_core::lamcore::{compute_lam, LamOptions};
use grass_core::model::Model;
use grass_core::rng::{self, tag};
use grass_core::synthdata::{load_dataset, save_dataset, ImagePatch, LoadOptions};
use grass_core::trainer::{self, guided_pass1, read_runlog, run, EpochRecord, RunOptions, TrainState};

use crate::{plot, viz, Cli, Command, GlobalArgs, Profile, OUTPUT_ROOT_ENV};

pub type Overrides = [(String, String)];

pub const CONFIG_FILE: &str = "config.toml";
pub const INCOMPLETE_MARKER: &str = "INCOMPLETE";
pub const DECODER_FILE: &str = "decoder.ckpt";
pub const METRICS_JSON: &str = "metrics.json";

pub fn dispatch(cli: Cli, overrides: &Overrides) -> Result<()> {
    let g = &cli.global;
    match cli.command {
        Command::MakeData {
            count,
            test_count,
        } => make_data(g, count, test_count, overrides),
        Command::Pretrain {
            resume,
            sweep,
            observe,
        } => pretrain(g, resume.as_deref(), sweep.as_deref(), observe, overrides),
        Command::Finetune { checkpoint } => finetune_cmd(g, &checkpoint, overrides),
        Command::Evaluate {
            checkpoint,
            decoder,
        } => evaluate_cmd(g, &checkpoint, &decoder, overrides),
        Command::AnalyzeObjects { checkpoint } => analyze_objects(g, checkpoint.as_deref(), overrides),
        Command::VisualizeLam {
            checkpoint,
            images,
            count,
            threshold,
        } => visualize_lam(g, &checkpoint, images.as_deref(), count, threshold, overrides),
        Command::Report { runs } => report(g, &runs),
    }
}

/// Separates `--section.key value` (or `--section.key=value`) pairs from
/// the arguments clap parses. Config keys are always dotted.
pub fn split_overrides(args: impl IntoIterator<Item = String>) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::new();
    let mut pairs = Vec::new();
    let mut it = args.into_iter();
    while let Some(tok) = it.next() {
        if tok == "--" {
            rest.push(tok);
            rest.extend(it.by_ref());
            break;
        }
        let Some(flag) = tok.strip_prefix("--") else {
            rest.push(tok);
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n, Some(v.to_string())),
            None => (flag, None),
        };
        if !name.contains('.') {
            rest.push(tok);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it.next().ok_or_else(|| anyhow!("missing value for `--{name}`"))?,
        };
        pairs.push((name.to_string(), value));
    }
    Ok((rest, pairs))
}

fn apply(cfg: &ExperimentConfig, pairs: &[(String, String)]) -> Result<ExperimentConfig> {
    Ok(cfg.with_overrides(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?)
}

fn resolve_config(g: &GlobalArgs, overrides: &Overrides) -> Result<ExperimentConfig> {
    let base = match &g.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => match g.profile {
            Profile::Toy => ExperimentConfig::toy(),
            Profile::Paper => ExperimentConfig::default(),
        },
    };
    let mut cfg = apply(&base, overrides)?;
    if let Some(seed) = g.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Uses the training section stored in a checkpoint so that the frozen
/// config beside the outputs describes the model actually used.
fn with_checkpoint(mut cfg: ExperimentConfig, ckpt: &Checkpoint) -> ExperimentConfig {
    let seed = cfg.train.seed;
    cfg.train = ckpt.header.config.clone();
    cfg.train.seed = seed;
    cfg
}

fn default_out(g: &GlobalArgs, command: &str) -> PathBuf {
    g.out.clone().unwrap_or_else(|| {
        std::env::var_os(OUTPUT_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"))
            .join(command)
    })
}

/// An output directory carrying an `INCOMPLETE` marker until `finish`.
struct RunDir {
    path: PathBuf,
}

impl RunDir {
    fn create(path: PathBuf, cfg: &ExperimentConfig) -> Result<Self> {
        fs::create_dir_all(&path).with_context(|| format!("creating {}", path.display()))?;
        fs::write(path.join(INCOMPLETE_MARKER), "run did not finish\n")?;
        cfg.save(&path.join(CONFIG_FILE))?;
        Ok(Self { path })
    }

    fn finish(self) -> Result<PathBuf> {
        fs::remove_file(self.path.join(INCOMPLETE_MARKER))?;
        Ok(self.path)
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn make_data(g: &GlobalArgs, count: Option<usize>, test_count: Option<usize>, overrides: &Overrides) -> Result<()> {
    let mut cfg = resolve_config(g, overrides)?;
    cfg.data.train_dir = None;
    cfg.data.test_dir = None;
    if let Some(c) = count {
        cfg.data.synthetic_train_count = c;
    }
    if let Some(c) = test_count {
        cfg.data.synthetic_test_count = c;
    }
    let out = default_out(g, "make-data");
    let dir = RunDir::create(out.clone(), &cfg)?;
    let seed = cfg.train.seed;
    let train = cfg.data.train_set(seed)?;
    let test = cfg.data.test_set(seed)?;
    save_dataset(&out.join("train"), &train)?;
    save_dataset(&out.join("test"), &test)?;
    let root = fs::canonicalize(&out)?;
    cfg.data.train_dir = Some(root.join("train"));
    cfg.data.test_dir = Some(root.join("test"));
    cfg.data.image_size = cfg.data.synthetic.image_size;
    cfg.data.num_classes = cfg.data.synthetic.num_classes;
    cfg.save(&out.join(CONFIG_FILE))?;
    dir.finish()?;
    println!(
        "wrote {} train and {} test patches to {} (config: {})",
        train.len(),
        test.len(),
        out.display(),
        out.join(CONFIG_FILE).display()
    );
    Ok(())
}

/// `warmup=0,50` into the dotted key and its values.
pub fn parse_sweep(spec: &str) -> Result<(String, String, Vec<String>)> {
    let (name, values) = spec
        .split_once('=')
        .ok_or_else(|| anyhow!("sweep must look like `key=v1,v2,...`"))?;
    let key = match name {
        "warmup" => "train.warmup_epochs",
        "threshold" => "train.threshold",
        other => other,
    };
    let values: Vec<String> = values
        .split(',')
        .map(|v| v.trim().to_string())
        .filter(|v| !v.is_empty())
        .collect();
    ensure!(!values.is_empty(), "sweep `{spec}` lists no values");
    Ok((key.to_string(), name.replace('.', "_"), values))
}

fn pretrain(
    g: &GlobalArgs,
    resume: Option<&Path>,
    sweep: Option<&str>,
    observe: bool,
    overrides: &Overrides,
) -> Result<()> {
    let mut cfg = resolve_config(g, overrides)?;
    let out = default_out(g, "pretrain");
    let resume = resume.map(Checkpoint::load).transpose()?;
    if let Some(ckpt) = &resume {
        ensure!(sweep.is_none(), "--resume and --sweep cannot be combined");
        cfg.train = ckpt.header.config.clone();
        eprintln!(
            "resuming after epoch {} with the training config stored in the checkpoint",
            ckpt.header.epoch
        );
    }
    let data = cfg.data.train_set(cfg.train.seed)?;
    let runs: Vec<(PathBuf, ExperimentConfig)> = match sweep {
        None => vec![(out.clone(), cfg.clone())],
        Some(spec) => {
            let (key, label, values) = parse_sweep(spec)?;
            let mut runs = Vec::new();
            for v in values {
                let c = apply(&cfg, &[(key.clone(), v.clone())])?;
                c.validate().with_context(|| format!("sweep value {key} = {v}"))?;
                runs.push((out.join(format!("{label}_{v}")), c));
            }
            runs
        }
    };
    for (path, c) in runs {
        let dir = RunDir::create(path.clone(), &c)?;
        let outcome = run(
            &c.train,
            &data,
            &RunOptions {
                out_dir: Some(path.clone()),
                resume: resume.clone(),
                observe,
                stop_after: None,
            },
        )?;
        dir.finish()?;
        let last = outcome.log.last();
        println!(
            "{}: {} epochs, final loss {}, mean crop area {}",
            path.display(),
            outcome.state.epoch,
            last.map_or("n/a".into(), |r| format!("{:.5}", r.mean_loss)),
            last.and_then(|r| r.mean_crop_area_fraction)
                .map_or("n/a".into(), |a| format!("{a:.4}")),
        );
    }
    Ok(())
}

fn load_encoder(path: &Path) -> Result<(Checkpoint, Model)> {
    let ckpt = Checkpoint::load(path)?;
    let (model, _) = ckpt.restore()?;
    Ok((ckpt, model))
}

#[derive(Serialize)]
struct FinetuneSummary<'a> {
    checkpoint: &'a Path,
    subset: &'a [String],
    epoch_losses: &'a [f64],
    encoder_hash_before: &'a str,
    encoder_hash_after: &'a str,
}

fn finetune_cmd(g: &GlobalArgs, checkpoint: &Path, overrides: &Overrides) -> Result<()> {
    let cfg = resolve_config(g, overrides)?;
    let (ckpt, model) = load_encoder(checkpoint)?;
    let cfg = with_checkpoint(cfg, &ckpt);
    let out = default_out(g, "finetune");
    let dir = RunDir::create(out.clone(), &cfg)?;
    let labeled = cfg.data.train_set(cfg.train.seed)?;
    let outcome = finetune(&model, &labeled, cfg.data.classes(), &cfg.finetune, cfg.train.seed)?;
    outcome
        .model
        .decoder
        .save(&out.join(DECODER_FILE), &outcome.encoder_hash_after)?;
    write_json(
        &out.join("finetune.json"),
        &FinetuneSummary {
            checkpoint,
            subset: &outcome.subset,
            epoch_losses: &outcome.epoch_losses,
            encoder_hash_before: &outcome.encoder_hash_before,
            encoder_hash_after: &outcome.encoder_hash_after,
        },
    )?;
    dir.finish()?;
    println!(
        "decoder trained on {} labelled patches, final loss {:.5}: {}",
        outcome.subset.len(),
        outcome.epoch_losses.last().copied().unwrap_or(f64::NAN),
        out.join(DECODER_FILE).display()
    );
    Ok(())
}

#[derive(Serialize)]
struct MetricsFile<'a> {
    summary: String,
    metrics: &'a SegMetrics,
    confusion: &'a ConfusionMatrix,
}

fn evaluate_cmd(g: &GlobalArgs, checkpoint: &Path, decoder: &Path, overrides: &Overrides) -> Result<()> {
    let cfg = resolve_config(g, overrides)?;
    let (ckpt, model) = load_encoder(checkpoint)?;
    let cfg = with_checkpoint(cfg, &ckpt);
    let (dec, hash) = SegDecoder::from_container(&Container::load(decoder)?)?;
    ensure!(
        hash == model.encoder_hash(),
        "decoder {} was trained on a different encoder than {}",
        decoder.display(),
        checkpoint.display()
    );
    let out = default_out(g, "evaluate");
    let dir = RunDir::create(out.clone(), &cfg)?;
    let test = cfg.data.test_set(cfg.train.seed)?;
    let seg = SegmentationModel::new(model, dec)?;
    let (cm, metrics) = evaluate(&seg, &test)?;
    let summary = metrics.summary_line();
    fs::write(out.join("metrics.csv"), format!("{}{summary}\n", metrics.to_table(None)))?;
    write_json(
        &out.join(METRICS_JSON),
        &MetricsFile {
            summary: summary.clone(),
            metrics: &metrics,
            confusion: &cm,
        },
    )?;
    dir.finish()?;
    println!("{summary}");
    Ok(())
}

fn require_masks(data: &[ImagePatch]) -> Result<()> {
    ensure!(
        data.iter().all(|p| p.mask.is_some()),
        "object-count analysis needs masks for every training patch"
    );
    Ok(())
}

fn analyze_objects(g: &GlobalArgs, checkpoint: Option<&Path>, overrides: &Overrides) -> Result<()> {
    let mut cfg = resolve_config(g, overrides)?;
    let out = default_out(g, "analyze-objects");
    let records: Vec<EpochRecord> = match checkpoint {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            cfg = with_checkpoint(cfg, &ckpt);
            let mut train: TrainConfig = cfg.train.clone();
            train.batch_size = cfg.analysis.batch_size;
            train.total_epochs = ckpt.header.epoch + cfg.analysis.observe_epochs;
            train.validate()?;
            cfg.train = train.clone();
            let dir = RunDir::create(out.clone(), &cfg)?;
            let data = cfg.data.train_set(train.seed)?;
            require_masks(&data)?;
            let mut state = TrainState::from_checkpoint(&ckpt)?;
            let mut records = Vec::new();
            while state.epoch < train.total_epochs {
                records.push(trainer::train_next_epoch(&mut state, &train, &data, true)?);
            }
            let lines: Vec<String> = records.iter().map(serde_json::to_string).collect::<Result<_, _>>()?;
            fs::write(out.join(trainer::RUNLOG_FILE), lines.join("\n") + "\n")?;
            write_counts(&out, &records)?;
            dir.finish()?;
            records
        }
        None => {
            cfg.train.batch_size = cfg.analysis.batch_size;
            cfg.validate()?;
            let dir = RunDir::create(out.clone(), &cfg)?;
            let data = cfg.data.train_set(cfg.train.seed)?;
            require_masks(&data)?;
            let outcome = run(
                &cfg.train,
                &data,
                &RunOptions {
                    out_dir: Some(out.clone()),
                    observe: true,
                    ..RunOptions::default()
                },
            )?;
            write_counts(&out, &outcome.log)?;
            dir.finish()?;
            outcome.log
        }
    };
    let tail: Vec<_> = records.iter().rev().take(10).filter_map(|r| r.object_counts).collect();
    if !tail.is_empty() {
        let n = tail.len() as f64;
        let avg = |f: &dyn Fn(&grass_core::evalseg::ObjectCounts) -> f64| tail.iter().map(f).sum::<f64>() / n;
        println!(
            "last {} epochs: mean classes original {:.3}, random crop {:.3}, guided crop {:.3}; single-class random crop {:.2}, guided crop {:.2}",
            tail.len(),
            avg(&|c| c.original.mean_classes),
            avg(&|c| c.random_crop.mean_classes),
            avg(&|c| c.guided_crop.mean_classes),
            avg(&|c| c.random_crop.single_class as f64),
            avg(&|c| c.guided_crop.single_class as f64),
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn write_counts(out: &Path, records: &[EpochRecord]) -> Result<()> {
    let mut csv = String::from("epoch,stage,arm,samples,mean_classes,single_class\n");
    for r in records {
        let Some(c) = r.object_counts else { continue };
        let stage = serde_json::to_value(r.stage)?;
        for (arm, s) in [("original", c.original), ("random_crop", c.random_crop), ("guided_crop", c.guided_crop)] {
            csv.push_str(&format!(
                "{},{},{arm},{},{:.6},{}\n",
                r.epoch,
                stage.as_str().unwrap_or_default(),
                s.samples,
                s.mean_classes,
                s.single_class
            ));
        }
    }
    fs::write(out.join("object_counts.csv"), csv)?;
    plot::object_counts(out, records)
}

fn visualize_lam(
    g: &GlobalArgs,
    checkpoint: &Path,
    images: Option<&Path>,
    count: usize,
    threshold: Option<f64>,
    overrides: &Overrides,
) -> Result<()> {
    ensure!(count >= 2, "--count must be at least 2 (the loss needs two images)");
    let cfg = resolve_config(g, overrides)?;
    let (ckpt, model) = load_encoder(checkpoint)?;
    let mut cfg = with_checkpoint(cfg, &ckpt);
    if let Some(t) = threshold {
        cfg.train.threshold = t;
    }
    cfg.validate()?;
    let mut patches = match images {
        Some(dir) => load_dataset(
            dir,
            &LoadOptions {
                with_masks: false,
                crop_size: Some(cfg.data.image_size),
                num_classes: None,
            },
        )?,
        None => cfg.data.test_set(cfg.train.seed)?,
    };
    patches.truncate(count);
    ensure!(patches.len() >= 2, "need at least two images, found {}", patches.len());
    let out = default_out(g, "visualize-lam");
    let dir = RunDir::create(out.clone(), &cfg)?;
    let key = rng::derive_key(cfg.train.seed, &[tag::AUGMENT, u64::MAX]);
    let views = augment_batch(&patches, &cfg.train.augment, key)?;
    let pass = guided_pass1(&model, &views, &cfg.train)?;
    let opts = LamOptions {
        rectify: cfg.train.rectify_lam,
    };
    let mut crops = Vec::new();
    for (idx, view) in views.views.iter().enumerate() {
        let features = model.encode(&view.pixels)?;
        let lam = compute_lam(&features, &pass.grads[idx], (view.height(), view.width()), opts)?;
        let rec = &views.records[idx];
        let name = format!("lam_{:03}_v{}.png", rec.source_index, rec.view_index);
        viz::strip(&view.pixels, &lam, pass.crops[idx].crop, &pass.resampled[idx].pixels)
            .save(out.join(&name))
            .with_context(|| format!("writing {name}"))?;
        crops.push(serde_json::json!({
            "file": name,
            "source_id": rec.source_id,
            "view": rec.view_index,
            "crop": pass.crops[idx].crop,
            "dar_pixels": pass.crops[idx].dar_pixels,
            "fallback": pass.crops[idx].fallback,
        }));
    }
    write_json(&out.join("crops.json"), &crops)?;
    dir.finish()?;
    println!(
        "wrote {} panels (view | attention | box | crop) at threshold {} to {}",
        crops.len(),
        cfg.train.threshold,
        out.display()
    );
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct ReportRow {
    pub run: String,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub threshold: f64,
    pub epochs_logged: usize,
    pub final_loss: Option<f64>,
    pub mean_crop_area: Option<f64>,
    pub oa: Option<f64>,
    pub miou: Option<f64>,
    pub macc: Option<f64>,
}

/// Run directories, descending one level into sweep folders.
fn collect_runs(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.join(CONFIG_FILE).is_file() {
            out.push(p.clone());
            continue;
        }
        let mut subs: Vec<PathBuf> = fs::read_dir(p)
            .with_context(|| format!("reading {}", p.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|s| s.join(CONFIG_FILE).is_file())
            .collect();
        subs.sort();
        ensure!(!subs.is_empty(), "{} holds no run directories", p.display());
        out.extend(subs);
    }
    Ok(out)
}

pub fn report_row(dir: &Path) -> Result<ReportRow> {
    let cfg = ExperimentConfig::load(&dir.join(CONFIG_FILE))?;
    let log_path = dir.join(trainer::RUNLOG_FILE);
    let log = if log_path.is_file() {
        read_runlog(&log_path)?
    } else {
        Vec::new()
    };
    let metric = |name: &str| -> Result<Option<f64>> {
        let p = dir.join(METRICS_JSON);
        if !p.is_file() {
            return Ok(None);
        }
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&p)?)?;
        Ok(v["metrics"][name].as_f64())
    };
    if dir.join(INCOMPLETE_MARKER).exists() {
        eprintln!("warning: {} is marked incomplete", dir.display());
    }
    Ok(ReportRow {
        run: dir.display().to_string(),
        warmup_epochs: cfg.train.warmup_epochs,
        total_epochs: cfg.train.total_epochs,
        threshold: cfg.train.threshold,
        epochs_logged: log.len(),
        final_loss: log.last().map(|r| r.mean_loss),
        mean_crop_area: log.iter().rev().find_map(|r| r.mean_crop_area_fraction),
        oa: metric("oa")?,
        miou: metric("miou")?,
        macc: metric("macc")?,
    })
}

fn report(g: &GlobalArgs, runs: &[PathBuf]) -> Result<()> {
    let dirs = collect_runs(runs)?;
    let rows: Vec<ReportRow> = dirs.iter().map(|d| report_row(d)).collect::<Result<_>>()?;
    let fmt = |v: Option<f64>, pct: bool| match v {
        Some(x) if pct => format!("{:.2}", x * 100.0),
        Some(x) => format!("{x:.4}"),
        None => "-".into(),
    };
    let mut csv = String::from("run,warmup_epochs,total_epochs,threshold,epochs_logged,final_loss,mean_crop_area,oa,miou,macc\n");
    let mut md = String::from(
        "| run | warm-up | epochs | threshold | final loss | crop area | OA | mIoU | mAcc |\n|---|---|---|---|---|---|---|---|---|\n",
    );
    for r in &rows {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.run,
            r.warmup_epochs,
            r.total_epochs,
            r.threshold,
            r.epochs_logged,
            opt(r.final_loss),
            opt(r.mean_crop_area),
            opt(r.oa),
            opt(r.miou),
            opt(r.macc)
        ));
        md.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {} | {} | {} |\n",
            r.run,
            r.warmup_epochs,
            r.total_epochs,
            r.threshold,
            fmt(r.final_loss, false),
            fmt(r.mean_crop_area, false),
            fmt(r.oa, true),
            fmt(r.miou, true),
            fmt(r.macc, true)
        ));
    }
    let out = default_out(g, "report");
    fs::create_dir_all(&out)?;
    fs::write(out.join("report.csv"), &csv)?;
    fs::write(out.join("report.md"), &md)?;
    print!("{md}");
    if rows.is_empty() {
        bail!("no runs to report");
    }
    Ok(())
}
