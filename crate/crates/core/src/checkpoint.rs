//! Binary checkpoints.
//!
//! Layout, all integers little-endian: magic `MSBC`, `u32` version, `u32`
//! header length and a UTF-8 `key = value` header (model config,
//! `input_dims`, `epoch`, `seed`), then `u32` record count and one record per
//! parameter: `u32` name length, name bytes, `u32` rank, `u64` per dimension,
//! and the values as `f64`.

use std::fs;
use std::path::Path;

use crate::autodiff::ParamStore;
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::modality::{format_modalities, Modality};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MSBC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CheckpointMeta {
    /// Epochs trained so far.
    pub epoch: usize,
    pub seed: u64,
}

fn format_dims(dims: &[(Modality, usize)]) -> String {
    dims.iter()
        .map(|(m, d)| format!("{}:{d}", m.letter()))
        .collect::<Vec<_>>()
        .join(",")
}

pub fn parse_dims(s: &str) -> Result<Vec<(Modality, usize)>> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            let (m, d) = p
                .split_once(':')
                .ok_or_else(|| Error::config(format!("expected `modality:width`, got `{p}`")))?;
            let d = d
                .trim()
                .parse()
                .map_err(|_| Error::config(format!("invalid width in `{p}`")))?;
            Ok((m.parse()?, d))
        })
        .collect()
}

pub fn encode_checkpoint<S: Scalar>(model: &Model<S>, meta: CheckpointMeta) -> Vec<u8> {
    let mut kv = KeyValues::default();
    model.config.to_key_values(&mut kv);
    kv.push("input_dims", format_dims(&model.input_dims));
    kv.push("epoch", meta.epoch);
    kv.push("seed", meta.seed);
    let header = kv.to_text();

    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (_, name, t) in model.params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

fn header_value<'a>(kv: &'a KeyValues, key: &str) -> Result<&'a str> {
    kv.get(key)
        .ok_or_else(|| Error::Checkpoint(format!("header has no `{key}`")))
}

pub fn decode_checkpoint<S: Scalar>(bytes: &[u8]) -> Result<(Model<S>, CheckpointMeta)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic, not a checkpoint file".into()));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let header_len = r.u32("header length")? as usize;
    let header = std::str::from_utf8(r.take(header_len, "header")?)
        .map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
    let kv = KeyValues::parse(header).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;

    let mut config = ModelConfig::default();
    for (k, v) in &kv.entries {
        if matches!(k.as_str(), "input_dims" | "epoch" | "seed") {
            continue;
        }
        if !config.apply(k, v)? {
            return Err(Error::Checkpoint(format!("unknown header key `{k}`")));
        }
    }
    let dims = parse_dims(header_value(&kv, "input_dims")?)?;
    let meta = CheckpointMeta {
        epoch: header_value(&kv, "epoch")?
            .parse()
            .map_err(|_| Error::Checkpoint("bad epoch".into()))?,
        seed: header_value(&kv, "seed")?
            .parse()
            .map_err(|_| Error::Checkpoint("bad seed".into()))?,
    };

    let count = r.u32("record count")? as usize;
    let mut store: ParamStore<f64> = ParamStore::new();
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "parameter name")?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::Checkpoint(format!("`{name}` has rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| r.u64("shape").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Checkpoint(format!("`{name}` has invalid shape {shape:?}")))?;
        let raw = r.take(
            numel.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?,
            "values",
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if store.id_of(&name).is_some() {
            return Err(Error::Checkpoint(format!("`{name}` stored twice")));
        }
        store.add(name, Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }

    let mut model = Model::<S>::new(config, &dims, meta.seed)?;
    model
        .load_values(&store)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok((model, meta))
}

pub fn save_checkpoint<S: Scalar>(path: &Path, model: &Model<S>, meta: CheckpointMeta) -> Result<()> {
    fs::write(path, encode_checkpoint(model, meta)).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<(Model<S>, CheckpointMeta)> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode_checkpoint(&bytes)
}

/// Fails when a run asks for different modalities than the checkpoint was trained on.
pub fn ensure_modalities<S>(model: &Model<S>, requested: &[Modality]) -> Result<()> {
    if model.config.modalities != requested {
        return Err(Error::config(format!(
            "checkpoint was trained on modalities {} but {} were requested",
            format_modalities(&model.config.modalities),
            format_modalities(requested)
        )));
    }
    Ok(())
}
