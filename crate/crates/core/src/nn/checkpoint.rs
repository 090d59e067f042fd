//! Versioned checkpoint container.
//!
//! Layout: `CKPT_MAGIC` (8 bytes), version (u32), reserved (u32), header length
//! (u64), a JSON header, then every parameter as little-endian `f64` in header
//! order. The header records names, shapes, offsets, groups, trainable flags,
//! the network spec, phase tag, normalization stats and a payload digest.

use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Net, Network, NetworkSpec, WeightHead};
use crate::datagen::NormStats;
use crate::error::{Error, Result};
use crate::grid::PdeKind;
use crate::params::{ParamGroup, ParamStore};

pub const CKPT_MAGIC: &[u8; 8] = b"ECMCKPT\0";
pub const CKPT_VERSION: u32 = 1;

/// Training phase that produced a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Init,
    Pretrain,
    Stage1,
    Stage2,
    Stage2JointAblation,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Init => "init",
            Phase::Pretrain => "pretrain",
            Phase::Stage1 => "stage1",
            Phase::Stage2 => "stage2",
            Phase::Stage2JointAblation => "stage2_joint_ablation",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub phase: Phase,
    pub net: Net,
    pub head: WeightHead,
    pub norm_stats: NormStats,
    pub kind: Option<PdeKind>,
    pub lambda: Option<[f64; 3]>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    group: ParamGroup,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    phase: Phase,
    spec: NetworkSpec,
    split: bool,
    frozen_checksum: Option<String>,
    norm_stats: NormStats,
    kind: Option<PdeKind>,
    lambda: Option<[f64; 3]>,
    entries: Vec<Entry>,
    payload_sha256: String,
}

fn stores(ck: &Checkpoint) -> [&ParamStore; 2] {
    [ck.net.store(), ck.head.store()]
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = Vec::new();
        let mut payload = Vec::new();
        let mut offset = 0;
        for store in stores(self) {
            for (_, p) in store.iter() {
                entries.push(Entry {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    offset,
                    group: p.group,
                    trainable: p.trainable,
                });
                for v in p.value.iter() {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
                offset += p.value.len();
            }
        }
        let split = self.net.as_split();
        let header = Header {
            phase: self.phase,
            spec: self.net.spec(),
            split: split.is_some_and(|s| s.is_split()),
            frozen_checksum: split.and_then(|s| s.frozen_checksum().map(str::to_string)),
            norm_stats: self.norm_stats,
            kind: self.kind,
            lambda: self.lambda,
            entries,
            payload_sha256: hex::encode(Sha256::digest(&payload)),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(24 + json.len() + payload.len());
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        if bytes.len() < 24 || &bytes[..8] != CKPT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CKPT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
        let body = bytes
            .get(24..24usize.saturating_add(hlen))
            .ok_or_else(|| Error::Format("truncated checkpoint header".into()))?;
        let header: Header =
            serde_json::from_slice(body).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let payload = &bytes[24 + hlen..];
        if hex::encode(Sha256::digest(payload)) != header.payload_sha256 {
            return Err(Error::Format("checkpoint payload digest mismatch".into()));
        }
        let mut net = Net::build(&header.spec)?;
        let mut head = WeightHead::new(0);
        for e in &header.entries {
            let len: usize = e.shape.iter().product();
            let start = e.offset * 8;
            let raw = payload
                .get(start..start + len * 8)
                .ok_or_else(|| Error::Format(format!("parameter {} out of bounds", e.name)))?;
            let vals: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            let store = if e.group == ParamGroup::Head {
                head.store_mut()
            } else {
                net.store_mut()
            };
            let idx = store
                .find(&e.name)
                .ok_or_else(|| Error::Format(format!("unknown parameter {}", e.name)))?;
            if store.value(idx).shape() != e.shape.as_slice() {
                return Err(Error::Format(format!("shape mismatch for {}", e.name)));
            }
            *store.value_mut(idx) = ArrayD::from_shape_vec(IxDyn(&e.shape), vals).expect("length checked");
            store.set_trainable(idx, e.trainable);
        }
        let total = net.store().len() + head.store().len();
        if header.entries.len() != total {
            return Err(Error::Format(format!(
                "checkpoint has {} parameters, architecture needs {total}",
                header.entries.len()
            )));
        }
        if let Some(s) = net.as_split_mut() {
            s.set_split_flag(header.split);
            s.set_frozen_checksum(header.frozen_checksum.clone());
            if let Some(c) = &header.frozen_checksum {
                if *c != s.backbone_checksum() {
                    return Err(Error::Format("frozen backbone checksum does not match weights".into()));
                }
            }
        }
        Ok(Checkpoint {
            phase: header.phase,
            net,
            head,
            norm_stats: header.norm_stats,
            kind: header.kind,
            lambda: header.lambda,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
