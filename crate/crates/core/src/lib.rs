//! Gradient-guided sampling for self-supervised contrastive pretraining.
//!
//! A warm-up stage trains an encoder and projection head with a plain
//! instance-discrimination loss. After warm-up, every batch is passed
//! through the model once to obtain the loss gradient on the spatial
//! feature map; that gradient weights the feature channels into a loss
//! attention map, whose strongest connected region is cropped from each
//! view and fed through a second loss computation that drives the update.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod contrastive;
pub mod error;
pub mod evalseg;
pub mod lamcore;
pub mod model;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use error::{GrassError, Result};

pub use augment::{AugmentConfig, ViewBatch};
pub use checkpoint::Checkpoint;
pub use config::{DataConfig, ExperimentConfig, FinetuneConfig, TrainConfig};
pub use contrastive::{Formulation, LossConfig, Projections};
pub use evalseg::{ConfusionMatrix, SegMetrics, SegmentationModel};
pub use lamcore::{DiscriminationAttentionRegion, LossAttentionMap};
pub use model::{EncoderSpec, Model, ProjectorSpec};
pub use synthdata::{ImagePatch, Mask};
pub use tensor::{CropBox, Tensor3};
pub use trainer::{EpochRecord, Stage};
