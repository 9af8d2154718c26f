//! Minimal reverse-mode building blocks: convolution, linear layers and
//! ReLU over [`Tensor3`](crate::tensor::Tensor3), with all parameters kept
//! in one flat buffer addressed by ranges.

mod layers;

pub use layers::{relu, relu_backward, Conv2d, Linear};

use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSegment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

impl ParamSegment {
    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// Flat parameter buffer with named segments.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    pub data: Vec<f64>,
    pub segments: Vec<ParamSegment>,
}

impl ParamStore {
    pub fn alloc(&mut self, name: impl Into<String>, len: usize) -> Range<usize> {
        let offset = self.data.len();
        self.data.resize(offset + len, 0.0);
        self.segments.push(ParamSegment {
            name: name.into(),
            offset,
            len,
        });
        offset..offset + len
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// He-normal fill of `range` for a layer with `fan_in` inputs.
    pub fn init_he(&mut self, range: Range<usize>, fan_in: usize, rng: &mut impl Rng) {
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        for v in &mut self.data[range] {
            *v = normal.sample(rng);
        }
    }
}

/// SHA-256 over the little-endian bytes of `values`.
pub fn hash_params(values: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
