//! Versioned binary container for model, optimizer and schedule state.
//!
//! Layout: magic `GRASSCKP`, format version (`u32` LE), header length
//! (`u64` LE), JSON header, then each `f64` array as a `u64` LE element
//! count followed by LE values, and finally a SHA-256 digest of everything
//! before it.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::TrainConfig;
use crate::error::{ensure, GrassError, Result};
use crate::model::Model;
use crate::nn::ParamSegment;
use crate::optim::Sgd;

pub const MAGIC: &[u8; 8] = b"GRASSCKP";
pub const FORMAT_VERSION: u32 = 1;

/// Raw container: a JSON header plus a list of `f64` arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub header: serde_json::Value,
    pub arrays: Vec<Vec<f64>>,
}

impl Container {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)
            .map_err(|e| GrassError::Checkpoint(format!("header encode: {e}")))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for a in &self.arrays {
            out.extend_from_slice(&(a.len() as u64).to_le_bytes());
            for v in a {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        ensure!(bytes.len() >= 8 + 4 + 8 + 32, Checkpoint, "file too short");
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        ensure!(Sha256::digest(body).as_slice() == digest, Checkpoint, "digest mismatch");
        ensure!(&body[..8] == MAGIC, Checkpoint, "bad magic");
        let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
        ensure!(
            version == FORMAT_VERSION,
            Checkpoint,
            "unsupported format version {version}"
        );
        let mut cursor = Cursor { buf: body, pos: 12 };
        let hlen = cursor.u64()? as usize;
        let header = serde_json::from_slice(cursor.take(hlen)?)
            .map_err(|e| GrassError::Checkpoint(format!("header decode: {e}")))?;
        let mut arrays = Vec::new();
        while cursor.pos < body.len() {
            let n = cursor.u64()? as usize;
            let raw = cursor.take(n.checked_mul(8).ok_or_else(|| GrassError::Checkpoint("array too large".into()))?)?;
            arrays.push(
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            );
        }
        Ok(Self { header, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| GrassError::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?).map_err(|e| GrassError::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| GrassError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| GrassError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        ensure!(self.pos + n <= self.buf.len(), Checkpoint, "truncated file");
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainHeader {
    pub kind: String,
    /// Completed epochs.
    pub epoch: usize,
    pub config: TrainConfig,
    pub segments: Vec<ParamSegment>,
    /// Random streams are derived from `(seed, epoch, batch, ...)`, so the
    /// seed and the next epoch index fully determine the RNG state.
    pub rng_seed: u64,
    pub next_epoch: usize,
    pub param_hash: String,
}

/// Pretraining snapshot: model, optimizer and schedule position.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: PretrainHeader,
    pub params: Vec<f64>,
    pub velocity: Vec<f64>,
}

impl Checkpoint {
    pub const KIND: &'static str = "grass-pretrain";

    pub fn capture(config: &TrainConfig, epoch: usize, model: &Model, optimizer: &Sgd) -> Self {
        Self {
            header: PretrainHeader {
                kind: Self::KIND.into(),
                epoch,
                config: config.clone(),
                segments: model.params().segments.clone(),
                rng_seed: config.seed,
                next_epoch: epoch + 1,
                param_hash: model.param_hash(),
            },
            params: model.params().data.clone(),
            velocity: optimizer.velocity.clone(),
        }
    }

    /// Rebuilds the model and optimizer this checkpoint was taken from.
    pub fn restore(&self) -> Result<(Model, Sgd)> {
        let cfg = &self.header.config;
        let mut model = Model::new(cfg.encoder.clone(), cfg.projector.clone(), cfg.seed)?;
        ensure!(
            model.params().segments == self.header.segments,
            Checkpoint,
            "parameter layout in checkpoint does not match the configured model"
        );
        model.load_params(&self.params)?;
        ensure!(
            model.param_hash() == self.header.param_hash,
            Checkpoint,
            "parameter hash mismatch after load"
        );
        ensure!(self.velocity.len() == self.params.len(), Checkpoint, "optimizer state size mismatch");
        let mut opt = Sgd::new(cfg.optimizer.clone(), self.params.len());
        opt.velocity.copy_from_slice(&self.velocity);
        Ok((model, opt))
    }

    pub fn to_container(&self) -> Result<Container> {
        Ok(Container {
            header: serde_json::to_value(&self.header)
                .map_err(|e| GrassError::Checkpoint(e.to_string()))?,
            arrays: vec![self.params.clone(), self.velocity.clone()],
        })
    }

    pub fn from_container(c: Container) -> Result<Self> {
        let header: PretrainHeader = serde_json::from_value(c.header)
            .map_err(|e| GrassError::Checkpoint(format!("header: {e}")))?;
        ensure!(header.kind == Self::KIND, Checkpoint, "not a pretraining checkpoint ({})", header.kind);
        let mut arrays = c.arrays.into_iter();
        let (Some(params), Some(velocity), None) = (arrays.next(), arrays.next(), arrays.next()) else {
            return Err(GrassError::Checkpoint("expected two arrays".into()));
        };
        Ok(Self {
            header,
            params,
            velocity,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(Container::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_faithful() {
        let cfg = TrainConfig::toy();
        let model = Model::new(cfg.encoder.clone(), cfg.projector.clone(), 3).unwrap();
        let mut opt = Sgd::new(cfg.optimizer.clone(), model.param_len());
        opt.velocity.iter_mut().enumerate().for_each(|(i, v)| *v = (i as f64).sin() * 1e-3);
        let mut c = Checkpoint::capture(&cfg, 7, &model, &opt);
        c.header.config.seed = 3;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        c.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, c);
        let (m, o) = back.restore().unwrap();
        assert_eq!(m.param_hash(), model.param_hash());
        assert_eq!(o.velocity, opt.velocity);
    }

    #[test]
    fn corruption_is_detected() {
        let c = Container {
            header: serde_json::json!({"kind": "x"}),
            arrays: vec![vec![1.0, 2.0]],
        };
        let mut bytes = c.to_bytes().unwrap();
        assert_eq!(Container::from_bytes(&bytes).unwrap(), c);
        bytes[30] ^= 1;
        assert!(Container::from_bytes(&bytes).is_err());
        assert!(Container::from_bytes(b"short").is_err());
    }

    #[test]
    fn wrong_kind_is_rejected() {
        let c = Container {
            header: serde_json::json!({"kind": "x"}),
            arrays: vec![],
        };
        assert!(Checkpoint::from_container(c).is_err());
    }
}
