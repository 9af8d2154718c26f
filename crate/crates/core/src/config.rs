//! Run configuration: one TOML document whose sections mirror the
//! structures below. Every field carries an explicit default so a
//! materialized config is fully self-describing.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::contrastive::LossConfig;
use crate::error::{ensure, GrassError, Result};
use crate::lamcore::GuidedSamplingConfig;
use crate::model::{EncoderSpec, ProjectorSpec};
use crate::optim::OptimizerConfig;
use crate::rng::{self, tag};
use crate::synthdata::{generate_dataset, load_dataset, ImagePatch, LoadOptions, MosaicSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub total_epochs: usize,
    /// Epochs of plain instance discrimination; guided sampling runs in
    /// epochs `warmup_epochs + 1 ..= total_epochs`.
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub threshold: f64,
    /// Minimum crop side in source pixels.
    pub min_box: usize,
    pub rectify_lam: bool,
    /// Write a checkpoint every this many epochs (0 = only at the end).
    pub checkpoint_every: usize,
    /// Serialize all work on one thread.
    pub reference_mode: bool,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    pub encoder: EncoderSpec,
    pub projector: ProjectorSpec,
    pub optimizer: OptimizerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            total_epochs: 350,
            warmup_epochs: 150,
            batch_size: 256,
            threshold: 0.5,
            min_box: 8,
            rectify_lam: false,
            checkpoint_every: 50,
            reference_mode: true,
            loss: LossConfig::default(),
            augment: AugmentConfig::default(),
            encoder: EncoderSpec::default(),
            projector: ProjectorSpec::default(),
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Desk-scale schedule for the toy encoder.
    pub fn toy() -> Self {
        Self {
            total_epochs: 50,
            warmup_epochs: 30,
            batch_size: 32,
            checkpoint_every: 10,
            ..Self::default()
        }
    }

    pub fn guided(&self) -> GuidedSamplingConfig {
        GuidedSamplingConfig {
            threshold: self.threshold,
            min_box: self.min_box,
            rectify_lam: self.rectify_lam,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.total_epochs >= 1, Config, "train.total_epochs must be >= 1");
        ensure!(
            self.warmup_epochs <= self.total_epochs,
            Config,
            "train.warmup_epochs ({}) exceeds train.total_epochs ({})",
            self.warmup_epochs,
            self.total_epochs
        );
        ensure!(self.batch_size >= 2, Config, "train.batch_size must be >= 2");
        ensure!(
            (0.0..1.0).contains(&self.threshold),
            Config,
            "train.threshold must lie in [0, 1)"
        );
        ensure!(self.min_box >= 1, Config, "train.min_box must be >= 1");
        self.loss.validate()?;
        self.augment.validate()?;
        self.encoder.validate()?;
        self.projector.validate()?;
        self.optimizer.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset directory (`images/`, `masks/`); synthetic mosaics are
    /// generated in memory when unset.
    pub train_dir: Option<PathBuf>,
    pub test_dir: Option<PathBuf>,
    pub image_size: usize,
    pub num_classes: usize,
    pub synthetic: MosaicSpec,
    pub synthetic_train_count: usize,
    pub synthetic_test_count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_dir: None,
            test_dir: None,
            image_size: 64,
            num_classes: 6,
            synthetic: MosaicSpec::default(),
            synthetic_train_count: 256,
            synthetic_test_count: 128,
        }
    }
}

impl DataConfig {
    /// Training patches: the configured directory (masks attached when a
    /// `masks/` folder exists) or seeded synthetic mosaics.
    pub fn train_set(&self, seed: u64) -> Result<Vec<ImagePatch>> {
        match &self.train_dir {
            Some(dir) => load_dataset(dir, &self.load_options(dir.join("masks").is_dir())),
            None => generate_dataset(
                &self.synthetic,
                self.synthetic_train_count,
                rng::derive_key(seed, &[tag::MOSAIC, 0]),
            ),
        }
    }

    /// Test patches; masks are required.
    pub fn test_set(&self, seed: u64) -> Result<Vec<ImagePatch>> {
        match &self.test_dir {
            Some(dir) => load_dataset(dir, &self.load_options(true)),
            None => generate_dataset(
                &self.synthetic,
                self.synthetic_test_count,
                rng::derive_key(seed, &[tag::MOSAIC, 1]),
            ),
        }
    }

    fn load_options(&self, with_masks: bool) -> LoadOptions {
        LoadOptions {
            with_masks,
            crop_size: Some(self.image_size),
            num_classes: Some(self.num_classes),
        }
    }

    /// Number of classes of whichever source is active.
    pub fn classes(&self) -> usize {
        if self.train_dir.is_some() || self.test_dir.is_some() {
            self.num_classes
        } else {
            self.synthetic.num_classes
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    /// Fraction of the labelled training set used to fit the decoder.
    pub label_fraction: f64,
    pub min_labeled: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub decoder_hidden: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            label_fraction: 0.01,
            min_labeled: 1,
            epochs: 150,
            batch_size: 16,
            decoder_hidden: 32,
            optimizer: OptimizerConfig {
                learning_rate: 0.05,
                ..OptimizerConfig::default()
            },
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.label_fraction > 0.0 && self.label_fraction <= 1.0,
            Config,
            "finetune.label_fraction must lie in (0, 1]"
        );
        ensure!(self.epochs >= 1, Config, "finetune.epochs must be >= 1");
        ensure!(self.batch_size >= 1, Config, "finetune.batch_size must be >= 1");
        ensure!(self.decoder_hidden >= 1, Config, "finetune.decoder_hidden must be >= 1");
        self.optimizer.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Epochs observed after the checkpoint being analysed.
    pub observe_epochs: usize,
    pub batch_size: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            observe_epochs: 50,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub train: TrainConfig,
    pub finetune: FinetuneConfig,
    pub analysis: AnalysisConfig,
}

impl ExperimentConfig {
    pub fn toy() -> Self {
        Self {
            train: TrainConfig::toy(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.finetune.validate()?;
        self.data.synthetic.validate()?;
        ensure!(
            self.data.num_classes >= 2 && self.data.num_classes <= 255,
            Config,
            "data.num_classes must be in [2, 255]"
        );
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| GrassError::Config(e.to_string()))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| GrassError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| GrassError::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?).map_err(|e| GrassError::io(path, e))
    }

    /// Applies dotted-key overrides such as `("train.batch_size", "32")`.
    /// Values parse as TOML literals, falling back to plain strings.
    pub fn with_overrides<'a>(
        &self,
        overrides: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Result<Self> {
        let mut doc = toml::Value::try_from(self).map_err(|e| GrassError::Config(e.to_string()))?;
        for (key, raw) in overrides {
            set_dotted(&mut doc, key, parse_literal(raw))?;
        }
        doc.try_into().map_err(|e: toml::de::Error| GrassError::Config(e.to_string()))
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_dotted(doc: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut cur = doc;
    for p in parents {
        cur = cur
            .get_mut(*p)
            .filter(|v| v.is_table())
            .ok_or_else(|| GrassError::Config(format!("unknown config section `{p}` in `{key}`")))?;
    }
    let table = cur.as_table_mut().expect("checked table");
    // integers given for float fields are widened
    let value = match (table.get(*last), value) {
        (Some(toml::Value::Float(_)), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
        (_, v) => v,
    };
    table.insert((*last).to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml_string().unwrap();
        assert!(text.contains("warmup_epochs = 150"));
        assert!(text.contains("batch_size = 256"));
        assert!(text.contains("formulation = \"paper-eq7\""));
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn overrides_apply_one_to_one() {
        let cfg = ExperimentConfig::default()
            .with_overrides([
                ("train.batch_size", "32"),
                ("train.loss.temperature", "1"),
                ("train.loss.formulation", "standard-ntxent"),
                ("data.train_dir", "some/dir"),
            ])
            .unwrap();
        assert_eq!(cfg.train.batch_size, 32);
        assert_eq!(cfg.train.loss.temperature, 1.0);
        assert_eq!(cfg.train.loss.formulation, crate::contrastive::Formulation::StandardNtXent);
        assert_eq!(cfg.data.train_dir, Some(PathBuf::from("some/dir")));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let cfg = ExperimentConfig::default();
        assert!(cfg.with_overrides([("train.batchsize", "3")]).is_err());
        assert!(cfg.with_overrides([("nope.batch_size", "3")]).is_err());
        assert!(ExperimentConfig::from_toml_str("[train]\nbogus = 1\n").is_err());
    }

    #[test]
    fn validation_catches_schedule_errors() {
        let mut cfg = TrainConfig::toy();
        cfg.warmup_epochs = cfg.total_epochs + 1;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::toy();
        cfg.batch_size = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::toy();
        cfg.threshold = 1.0;
        assert!(cfg.validate().is_err());
        assert!(TrainConfig::toy().validate().is_ok());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn synthetic_sets_are_seeded_and_disjoint() {
        let data = DataConfig {
            synthetic_train_count: 3,
            synthetic_test_count: 2,
            ..DataConfig::default()
        };
        let a = data.train_set(1).unwrap();
        assert_eq!(a, data.train_set(1).unwrap());
        assert_ne!(a, data.train_set(2).unwrap());
        let test = data.test_set(1).unwrap();
        assert_eq!(test.len(), 2);
        assert!(test.iter().all(|t| a.iter().all(|p| p.source_id != t.source_id)));
    }

    #[test]
    fn dataset_directories_are_loaded() {
        let dir = tempfile::tempdir().unwrap();
        let patches = generate_dataset(&MosaicSpec::default(), 2, 5).unwrap();
        crate::synthdata::save_dataset(dir.path(), &patches).unwrap();
        let data = DataConfig {
            train_dir: Some(dir.path().into()),
            test_dir: Some(dir.path().into()),
            ..DataConfig::default()
        };
        let train = data.train_set(0).unwrap();
        assert_eq!(train, patches);
        assert_eq!(data.test_set(0).unwrap().len(), 2);
    }
}
