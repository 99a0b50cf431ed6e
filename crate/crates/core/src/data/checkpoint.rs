//! Binary checkpoint format, bit-exact and little-endian throughout:
//!
//! ```text
//! magic "UCTN" | u32 version=1 | u32 entry_count
//! per entry: u32 name_len | name (UTF-8) | u8 dtype (0=f32,1=f64) | u8 rank
//!            | u64 × rank dims | payload (LE floats)
//! trailing u32 CRC32 over all preceding bytes
//! ```
//!
//! The model configuration rides along as scalar `meta.config.*` entries so a
//! checkpoint is self-describing without a second format.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use crate::config::{Mode, ModelConfig, SkipMode};
use crate::crc::crc32;
use crate::error::{CheckpointError, Error, Result};
use crate::model::ParamStore;
use crate::tensor::{Dtype, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"UCTN";
pub const VERSION: u32 = 1;

/// A tensor of either element type, as read back from disk.
#[derive(Clone, Debug, PartialEq)]
pub enum DynTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl DynTensor {
    pub fn dtype(&self) -> Dtype {
        match self {
            DynTensor::F32(_) => Dtype::F32,
            DynTensor::F64(_) => Dtype::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            DynTensor::F32(t) => t.shape(),
            DynTensor::F64(t) => t.shape(),
        }
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        match self {
            DynTensor::F32(t) => t.cast(),
            DynTensor::F64(t) => t.cast(),
        }
    }

    pub fn scalar_f64(&self) -> f64 {
        match self {
            DynTensor::F32(t) => t.item() as f64,
            DynTensor::F64(t) => t.item(),
        }
    }

    pub fn wrap<T: Scalar>(t: Tensor<T>) -> Self {
        match T::DTYPE {
            Dtype::F32 => DynTensor::F32(t.cast()),
            Dtype::F64 => DynTensor::F64(t.cast()),
        }
    }
}

#[derive(Debug)]
pub struct Checkpoint {
    pub entries: Vec<(String, DynTensor)>,
}

impl Checkpoint {
    /// Entries excluding `meta.*`, i.e. actual model parameters.
    pub fn param_entries(&self) -> impl Iterator<Item = &(String, DynTensor)> {
        self.entries.iter().filter(|(n, _)| !n.starts_with("meta."))
    }

    /// Decode the embedded model configuration, if present.
    pub fn model_config(&self) -> Option<ModelConfig> {
        let get = |k: &str| -> Option<f64> {
            self.entries
                .iter()
                .find(|(n, _)| n == &format!("meta.config.{k}"))
                .map(|(_, t)| t.scalar_f64())
        };
        let mode = match get("mode")? as u32 {
            0 => Mode::Plain,
            _ => Mode::UcTransNet,
        };
        let skip = |v: f64| match v as u32 {
            0 => SkipMode::Copy,
            1 => SkipMode::None,
            _ => SkipMode::CTrans,
        };
        let unmask = |bits: f64| -> Vec<usize> {
            let bits = bits as u32;
            (1..=4usize).filter(|l| bits & (1 << (l - 1)) != 0).collect()
        };
        Some(ModelConfig {
            mode,
            in_channels: get("in_channels")? as usize,
            num_classes: get("num_classes")? as usize,
            base_channels: get("base_channels")? as usize,
            patch_size: get("patch_size")? as usize,
            heads: get("heads")? as usize,
            cct_layers: get("cct_layers")? as usize,
            mlp_ratio: get("mlp_ratio")? as usize,
            skip_mode: [
                skip(get("skip1")?),
                skip(get("skip2")?),
                skip(get("skip3")?),
                skip(get("skip4")?),
            ],
            query_levels: unmask(get("query_mask")?),
            key_levels: unmask(get("key_mask")?),
            pos_embed: get("pos_embed")? != 0.0,
            learned_embed: get("learned_embed")? != 0.0,
            cca_relu: get("cca_relu")? != 0.0,
            dtype: if get("dtype")? as u32 == 1 { Dtype::F64 } else { Dtype::F32 },
        })
    }

    /// Rebuild a typed parameter store, casting entries as needed.
    pub fn param_store<T: Scalar>(&self) -> ParamStore<T> {
        let mut store = ParamStore::new();
        for (name, t) in self.param_entries() {
            store.insert(name.clone(), t.cast::<T>());
        }
        store
    }
}

fn config_meta(cfg: &ModelConfig) -> Vec<(String, f64)> {
    let mode = match cfg.mode {
        Mode::Plain => 0.0,
        Mode::UcTransNet => 1.0,
    };
    let skip = |s: SkipMode| match s {
        SkipMode::Copy => 0.0,
        SkipMode::None => 1.0,
        SkipMode::CTrans => 2.0,
    };
    let mask = |levels: &[usize]| -> f64 {
        levels.iter().fold(0u32, |acc, &l| acc | 1 << (l - 1)) as f64
    };
    vec![
        ("meta.config.mode".into(), mode),
        ("meta.config.in_channels".into(), cfg.in_channels as f64),
        ("meta.config.num_classes".into(), cfg.num_classes as f64),
        ("meta.config.base_channels".into(), cfg.base_channels as f64),
        ("meta.config.patch_size".into(), cfg.patch_size as f64),
        ("meta.config.heads".into(), cfg.heads as f64),
        ("meta.config.cct_layers".into(), cfg.cct_layers as f64),
        ("meta.config.mlp_ratio".into(), cfg.mlp_ratio as f64),
        ("meta.config.skip1".into(), skip(cfg.skip_mode[0])),
        ("meta.config.skip2".into(), skip(cfg.skip_mode[1])),
        ("meta.config.skip3".into(), skip(cfg.skip_mode[2])),
        ("meta.config.skip4".into(), skip(cfg.skip_mode[3])),
        ("meta.config.query_mask".into(), mask(&cfg.query_levels)),
        ("meta.config.key_mask".into(), mask(&cfg.key_levels)),
        ("meta.config.pos_embed".into(), cfg.pos_embed as u8 as f64),
        ("meta.config.learned_embed".into(), cfg.learned_embed as u8 as f64),
        ("meta.config.cca_relu".into(), cfg.cca_relu as u8 as f64),
        ("meta.config.dtype".into(), cfg.dtype.code() as f64),
    ]
}

fn push_entry_bytes(buf: &mut Vec<u8>, name: &str, dtype: Dtype, shape: &[usize], payload: &[u8]) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(dtype.code());
    buf.push(shape.len() as u8);
    for &d in shape {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    buf.extend_from_slice(payload);
}

/// Serialize a parameter store (plus optional config echo) to disk.
pub fn save_checkpoint<T: Scalar>(
    params: &ParamStore<T>,
    cfg: Option<&ModelConfig>,
    path: &Path,
) -> Result<()> {
    let meta = cfg.map(config_meta).unwrap_or_default();
    let count = params.len() + meta.len();

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(count as u32).to_le_bytes());
    for (name, tensor) in params.iter() {
        let mut payload = Vec::with_capacity(tensor.len() * 8);
        for &v in tensor.data() {
            payload.extend_from_slice(&v.to_le_bytes_vec());
        }
        push_entry_bytes(&mut buf, name, T::DTYPE, tensor.shape(), &payload);
    }
    for (name, value) in &meta {
        push_entry_bytes(&mut buf, name, Dtype::F64, &[1], &value.to_le_bytes());
    }
    let crc = crc32(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());

    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    File::create(path)?.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> std::result::Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Truncated(what));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self, what: &'static str) -> std::result::Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> std::result::Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    parse_checkpoint(&bytes).map_err(Error::from)
}

fn parse_checkpoint(bytes: &[u8]) -> std::result::Result<Checkpoint, CheckpointError> {
    if bytes.len() < 16 {
        return Err(CheckpointError::Truncated("header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let computed = crc32(body);
    if stored != computed {
        return Err(CheckpointError::BadCrc { stored, computed });
    }

    let mut cur = Cursor { bytes: body, pos: 8 };
    let count = cur.u32("entry count")? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.u32("name length")? as usize;
        let name = String::from_utf8(cur.take(name_len, "name")?.to_vec())
            .map_err(|_| CheckpointError::Malformed("entry name is not UTF-8".into()))?;
        let dtype_code = cur.take(1, "dtype")?[0];
        let dtype = Dtype::from_code(dtype_code)
            .ok_or_else(|| CheckpointError::Malformed(format!("unknown dtype code {dtype_code}")))?;
        let rank = cur.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u64("dimension")? as usize);
        }
        let n: usize = shape.iter().product();
        let tensor = match dtype {
            Dtype::F32 => {
                let raw = cur.take(n * 4, "payload")?;
                let data: Vec<f32> = raw.chunks_exact(4).map(f32::from_le_slice).collect();
                DynTensor::F32(
                    Tensor::new(&shape, data)
                        .map_err(|_| CheckpointError::Malformed(format!("bad shape for '{name}'")))?,
                )
            }
            Dtype::F64 => {
                let raw = cur.take(n * 8, "payload")?;
                let data: Vec<f64> = raw.chunks_exact(8).map(f64::from_le_slice).collect();
                DynTensor::F64(
                    Tensor::new(&shape, data)
                        .map_err(|_| CheckpointError::Malformed(format!("bad shape for '{name}'")))?,
                )
            }
        };
        entries.push((name, tensor));
    }
    if cur.pos != body.len() {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes after last entry",
            body.len() - cur.pos
        )));
    }
    Ok(Checkpoint { entries })
}
