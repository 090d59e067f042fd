//! Binary dataset container plus a `key = value` metadata sidecar.
//!
//! Layout: `MAGIC` (8 bytes), format version (u32), reserved (u32), then
//! `n` (u32), channel count (u32), sample count (u64), dtype tag (u32), then
//! every sample row-major in `[a, u]` order. All integers are little-endian.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use super::{Dataset, NormStats, GENERATOR_VERSION};
use crate::error::{Error, Result};
use crate::grid::{Grid2D, GridField, JointState, PdeKind};

pub const MAGIC: &[u8; 8] = b"ECMDATA\0";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 16 + 4 + 4 + 8 + 4;

/// Element type of the stored values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn tag(self) -> u32 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
        }
    }

    fn from_tag(tag: u32) -> Result<Self> {
        match tag {
            1 => Ok(DType::F32),
            2 => Ok(DType::F64),
            other => Err(Error::Format(format!("unknown dtype tag {other}"))),
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }
}

fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

impl Dataset {
    /// Serializes the dataset into the binary container.
    pub fn to_bytes(&self, dtype: DType) -> Vec<u8> {
        let n = self.grid.n();
        let mut out = Vec::with_capacity(HEADER_LEN + self.samples.len() * 2 * n * n * dtype.width());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        out.extend_from_slice(&(n as u32).to_le_bytes());
        out.extend_from_slice(&(JointState::CHANNELS as u32).to_le_bytes());
        out.extend_from_slice(&(self.samples.len() as u64).to_le_bytes());
        out.extend_from_slice(&dtype.tag().to_le_bytes());
        for s in &self.samples {
            for &v in s.a.as_slice().iter().chain(s.u.as_slice()) {
                match dtype {
                    DType::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                    DType::F64 => out.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
        out
    }

    fn metadata(&self, dtype: DType) -> String {
        let k = match self.kind {
            PdeKind::Helmholtz { k } => k,
            _ => 0.0,
        };
        format!(
            "kind = {}\nk = {k:?}\nn = {}\ncount = {}\nseed = {}\ndtype = {}\n\
             mean_a = {:?}\nstd_a = {:?}\nmean_u = {:?}\nstd_u = {:?}\ngenerator = {}\n",
            self.kind.name(),
            self.grid.n(),
            self.samples.len(),
            self.seed,
            dtype.name(),
            self.norm_stats.mean[0],
            self.norm_stats.std[0],
            self.norm_stats.mean[1],
            self.norm_stats.std[1],
            GENERATOR_VERSION,
        )
    }

    /// Writes `path` and its `path.meta` sidecar. Existing files are refused.
    pub fn save(&self, path: &Path, dtype: DType) -> Result<()> {
        let meta = meta_path(path);
        for p in [path, meta.as_path()] {
            if p.exists() {
                return Err(Error::Datagen(format!("refusing to overwrite {}", p.display())));
            }
        }
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes(dtype)).map_err(|e| Error::io(path, e))?;
        fs::write(&meta, self.metadata(dtype)).map_err(|e| Error::io(&meta, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let meta_file = meta_path(path);
        let meta = fs::read_to_string(&meta_file).map_err(|e| Error::io(&meta_file, e))?;
        Self::from_parts(&bytes, &meta)
    }

    /// Parses a container plus its sidecar text.
    pub fn from_parts(bytes: &[u8], meta: &str) -> Result<Dataset> {
        if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
            return Err(Error::Format("not a dataset file (bad magic)".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(8);
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let n = u32_at(16) as usize;
        let channels = u32_at(20) as usize;
        let count = u64::from_le_bytes(bytes[24..32].try_into().unwrap()) as usize;
        let dtype = DType::from_tag(u32_at(32))?;
        if channels != JointState::CHANNELS {
            return Err(Error::Format(format!("expected 2 channels, header says {channels}")));
        }
        let grid = Grid2D::new(n)?;
        let m = n * n;
        let expected = count
            .checked_mul(2 * m * dtype.width())
            .and_then(|b| b.checked_add(HEADER_LEN))
            .ok_or_else(|| Error::Format("header sizes overflow".into()))?;
        if bytes.len() != expected {
            return Err(Error::Format(format!(
                "payload is {} bytes, header implies {expected}",
                bytes.len()
            )));
        }
        let fields = parse_meta(meta)?;
        let get = |key: &str| {
            fields
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::Format(format!("metadata key `{key}` missing")))
        };
        let num = |key: &str| -> Result<f64> {
            get(key)?
                .parse::<f64>()
                .map_err(|_| Error::Format(format!("metadata key `{key}` is not a number")))
        };
        let kind = PdeKind::parse(get("kind")?, num("k")?)?;
        let seed = get("seed")?
            .parse::<u64>()
            .map_err(|_| Error::Format("metadata seed is not an integer".into()))?;
        if num("n")? as usize != n || num("count")? as usize != count {
            return Err(Error::Format("metadata disagrees with the binary header".into()));
        }
        let norm_stats = NormStats::new([num("mean_a")?, num("mean_u")?], [num("std_a")?, num("std_u")?])?;
        let w = dtype.width();
        let read = |idx: usize| -> f64 {
            let o = HEADER_LEN + idx * w;
            match dtype {
                DType::F32 => f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as f64,
                DType::F64 => f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap()),
            }
        };
        let mut samples = Vec::with_capacity(count);
        for s in 0..count {
            let base = s * 2 * m;
            let a = Array2::from_shape_fn((n, n), |(i, j)| read(base + i * n + j));
            let u = Array2::from_shape_fn((n, n), |(i, j)| read(base + m + i * n + j));
            let st = JointState::new(GridField::new(grid, a)?, GridField::new(grid, u)?).map_err(|e| Error::Sample {
                index: s,
                source: Box::new(e),
            })?;
            samples.push(st);
        }
        Ok(Dataset {
            kind,
            grid,
            seed,
            samples,
            norm_stats,
        })
    }
}

fn parse_meta(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("metadata line {} has no `=`", lineno + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}
