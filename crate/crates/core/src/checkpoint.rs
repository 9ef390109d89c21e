//! Self-describing binary checkpoints.
//!
//! Layout, all integers little-endian:
//! `"SETN"`, version `u32`, config length `u64`, config JSON, parameter
//! count `u64`, then per parameter: name length `u32`, name, trainable
//! `u8`, rank `u32`, dims `u64` each, values `f64`; finally an FNV-1a 64
//! checksum `u64` over every preceding byte.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SetnError};
use crate::graph::GnnKind;
use crate::model::{Fnv, ModelConfig, SetnModel};
use crate::numerics::Tensor;
use crate::params::Module;
use crate::trainer::TrainConfig;

pub const MAGIC: &[u8; 4] = b"SETN";
pub const FORMAT_VERSION: u32 = 1;

/// Configuration stored next to the weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn checksum(bytes: &[u8]) -> u64 {
    let mut h = Fnv::new();
    h.write(bytes);
    h.finish()
}

pub fn encode_model(model: &SetnModel, train: &TrainConfig) -> Vec<u8> {
    let meta = CheckpointMeta {
        model: model.config.clone(),
        train: train.clone(),
    };
    let json = serde_json::to_vec(&meta).expect("config serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let params = model.parameters();
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(u8::from(p.trainable()));
        let shape = p.value.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum = checksum(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

pub fn save_model(model: &SetnModel, train: &TrainConfig, path: &Path) -> Result<()> {
    fs::write(path, encode_model(model, train)).map_err(|e| SetnError::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| SetnError::Checkpoint("unexpected end of data".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| SetnError::Checkpoint("length overflow".into()))
    }
}

/// Parses checkpoint bytes. When `expected` is given, a checkpoint built
/// for another GNN kind is rejected before any weights are read.
pub fn decode_model(bytes: &[u8], expected: Option<GnnKind>) -> Result<(SetnModel, TrainConfig)> {
    if bytes.len() < MAGIC.len() + 4 + 8 || &bytes[..4] != MAGIC {
        return Err(SetnError::Checkpoint("missing SETN magic".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    if checksum(body) != stored {
        return Err(SetnError::Checkpoint("checksum mismatch (corrupt or truncated file)".into()));
    }
    let mut r = Reader { bytes: body, pos: 4 };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(SetnError::Checkpoint(format!(
            "format version {version}, this build reads {FORMAT_VERSION}"
        )));
    }
    let json_len = r.len()?;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(json_len)?)
        .map_err(|e| SetnError::Checkpoint(format!("bad config: {e}")))?;
    if let Some(kind) = expected {
        if kind != meta.model.gnn {
            return Err(SetnError::KindMismatch {
                expected: kind.as_str().into(),
                found: meta.model.gnn.as_str().into(),
            });
        }
    }

    let mut model = SetnModel::init(meta.model.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    let count = r.len()?;
    let mut params = model.parameters_mut();
    if count != params.len() {
        return Err(SetnError::Checkpoint(format!(
            "{count} parameter blocks, configuration implies {}",
            params.len()
        )));
    }
    for p in params.iter_mut() {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| SetnError::Checkpoint("parameter name is not UTF-8".into()))?;
        if name != p.name {
            return Err(SetnError::Checkpoint(format!(
                "expected parameter {:?}, found {name:?}",
                p.name
            )));
        }
        let trainable = match r.take(1)?[0] {
            0 => false,
            1 => true,
            b => return Err(SetnError::Checkpoint(format!("bad trainable flag {b}"))),
        };
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        if shape != p.value.shape() {
            return Err(SetnError::Checkpoint(format!(
                "parameter {name} has shape {shape:?}, expected {:?}",
                p.value.shape()
            )));
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| SetnError::Checkpoint("size overflow".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let value = Tensor::new(shape, data).map_err(|e| SetnError::Checkpoint(e.to_string()))?;
        p.value = value;
        p.set_trainable(trainable);
    }
    if r.pos != body.len() {
        return Err(SetnError::Checkpoint("trailing bytes after parameters".into()));
    }
    drop(params);
    Ok((model, meta.train))
}

pub fn load_model(path: &Path, expected: Option<GnnKind>) -> Result<(SetnModel, TrainConfig)> {
    let bytes = fs::read(path).map_err(|e| SetnError::io(path, e))?;
    decode_model(&bytes, expected)
}
