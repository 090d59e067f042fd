//! Named parameter storage shared by the networks, the tape and the optimizer.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub type Tensor = ArrayD<f64>;

static NEXT_TAG: AtomicU64 = AtomicU64::new(1);

/// Which sub-module a parameter belongs to. Freezing works on whole groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Shared encoder including the time embedding.
    Encoder,
    /// Coefficient (frozen-in-stage-2) decoder.
    DecoderA,
    /// Solution (active) decoder.
    DecoderU,
    /// Adaptive loss-weight head.
    Head,
    /// Plain fully-connected network.
    Mlp,
}

/// Globally unique handle of a parameter: the owning store plus its index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamKey {
    pub store: u64,
    pub index: usize,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Arc<Tensor>,
    pub trainable: bool,
}

#[derive(Debug)]
pub struct ParamStore {
    tag: u64,
    params: Vec<Param>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl Clone for ParamStore {
    /// Clones get a fresh tag so their gradients never alias the original's.
    fn clone(&self) -> Self {
        Self {
            tag: NEXT_TAG.fetch_add(1, Ordering::Relaxed),
            params: self.params.clone(),
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            tag: NEXT_TAG.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
        }
    }

    pub fn tag(&self) -> u64 {
        self.tag
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> usize {
        self.params.push(Param {
            name: name.into(),
            group,
            value: Arc::new(value),
            trainable: true,
        });
        self.params.len() - 1
    }

    pub fn key(&self, index: usize) -> ParamKey {
        ParamKey {
            store: self.tag,
            index,
        }
    }

    pub fn get(&self, index: usize) -> &Param {
        &self.params[index]
    }

    pub fn value(&self, index: usize) -> &Arc<Tensor> {
        &self.params[index].value
    }

    pub fn value_mut(&mut self, index: usize) -> &mut Tensor {
        Arc::make_mut(&mut self.params[index].value)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Param)> {
        self.params.iter().enumerate()
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn set_group_trainable(&mut self, group: ParamGroup, trainable: bool) {
        for p in self.params.iter_mut().filter(|p| p.group == group) {
            p.trainable = trainable;
        }
    }

    pub fn set_trainable(&mut self, index: usize, trainable: bool) {
        self.params[index].trainable = trainable;
    }

    pub fn count(&self, group: ParamGroup) -> usize {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn total_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// SHA-256 over names and little-endian values of every parameter in `groups`.
    pub fn checksum(&self, groups: &[ParamGroup]) -> String {
        let mut hasher = Sha256::new();
        for p in self.params.iter().filter(|p| groups.contains(&p.group)) {
            hasher.update(p.name.as_bytes());
            for v in p.value.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }
}
