//! Versioned checkpoint container.
//!
//! Layout: the 8-byte magic `ARMTCKPT`, a little-endian `u32` format version,
//! a `u64` manifest length, the JSON manifest, then tensor records. Each
//! record is a `u32` name length, the UTF-8 name, and the tensor's raw
//! encoding (rank, extents, little-endian values). Records appear in
//! manifest order: parameters, optimizer first/second moments, carry.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CarrySnapshot, Model, ModelConfig};
use crate::optim::AdamState;
use crate::params::ParamStore;
use crate::tensor::{Precision, Real, Tensor};

pub const MAGIC: &[u8; 8] = b"ARMTCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub precision: Precision,
    pub config: ModelConfig,
    pub params: Vec<String>,
    pub optimizer_step: Option<u64>,
    pub carry: Option<CarryManifest>,
    /// Caller-defined state (trainer position, RNG, metrics).
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CarryManifest {
    pub batch: usize,
    pub segments: usize,
    pub memory: usize,
    pub states: usize,
}

pub struct Checkpoint<R> {
    pub model: Model<R>,
    pub optimizer: Option<AdamState<R>>,
    pub carry: Option<CarrySnapshot<R>>,
    pub extra: serde_json::Value,
}

fn write_record<R: Real>(out: &mut Vec<u8>, name: &str, t: &Tensor<R>) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    t.write_raw(out);
}

fn read_record<R: Real>(bytes: &[u8], pos: &mut usize) -> Result<(String, Tensor<R>)> {
    let bad = || Error::Checkpoint("truncated record".into());
    let len = u32::from_le_bytes(bytes.get(*pos..*pos + 4).ok_or_else(bad)?.try_into().unwrap()) as usize;
    *pos += 4;
    let name = std::str::from_utf8(bytes.get(*pos..*pos + len).ok_or_else(bad)?)
        .map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))?
        .to_string();
    *pos += len;
    let (t, used) = Tensor::read_raw(&bytes[*pos..])?;
    *pos += used;
    Ok((name, t))
}

pub fn encode_checkpoint<R: Real>(
    model: &Model<R>,
    optimizer: Option<&AdamState<R>>,
    carry: Option<&CarrySnapshot<R>>,
    extra: &serde_json::Value,
) -> Result<Vec<u8>> {
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        precision: R::PRECISION,
        config: model.config().clone(),
        params: model.params().iter().map(|(_, p)| p.name.clone()).collect(),
        optimizer_step: optimizer.map(|o| o.step),
        carry: carry.map(|c| CarryManifest {
            batch: c.batch,
            segments: c.segments,
            memory: c.memory.len(),
            states: c.states.len(),
        }),
        extra: extra.clone(),
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(json.len() + model.num_parameters() * R::PRECISION.bytes() * 3);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, p) in model.params().iter() {
        write_record(&mut out, &p.name, &p.value);
    }
    if let Some(o) = optimizer {
        for ((_, p), m) in model.params().iter().zip(&o.m) {
            write_record(&mut out, &format!("adam.m.{}", p.name), m);
        }
        for ((_, p), v) in model.params().iter().zip(&o.v) {
            write_record(&mut out, &format!("adam.v.{}", p.name), v);
        }
    }
    if let Some(c) = carry {
        for (i, t) in c.memory.iter().enumerate() {
            write_record(&mut out, &format!("carry.memory.{i}"), t);
        }
        for (i, t) in c.states.iter().enumerate() {
            write_record(&mut out, &format!("carry.state.{i}"), t);
        }
    }
    Ok(out)
}

pub fn save_checkpoint<R: Real>(
    path: &Path,
    model: &Model<R>,
    optimizer: Option<&AdamState<R>>,
    carry: Option<&CarrySnapshot<R>>,
    extra: &serde_json::Value,
) -> Result<()> {
    let bytes = encode_checkpoint(model, optimizer, carry, extra)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(tmp, path)?;
    Ok(())
}

fn split_manifest(bytes: &[u8]) -> Result<(Manifest, usize)> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version}, this build reads {FORMAT_VERSION}"
        )));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let json = bytes
        .get(20..20 + len)
        .ok_or_else(|| Error::Checkpoint("truncated manifest".into()))?;
    Ok((serde_json::from_slice(json)?, 20 + len))
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    Ok(split_manifest(&fs::read(path)?)?.0)
}

pub fn decode_checkpoint<R: Real>(bytes: &[u8]) -> Result<Checkpoint<R>> {
    let (manifest, mut pos) = split_manifest(bytes)?;
    if manifest.precision != R::PRECISION {
        return Err(Error::Checkpoint(format!(
            "checkpoint stores {:?} values, reader expects {:?}",
            manifest.precision,
            R::PRECISION
        )));
    }
    let mut store = ParamStore::<R>::new();
    for name in &manifest.params {
        let (rec, t) = read_record::<R>(bytes, &mut pos)?;
        if &rec != name {
            return Err(Error::Checkpoint(format!("expected record `{name}`, found `{rec}`")));
        }
        store.register(rec, t)?;
    }
    let model = Model::from_params(manifest.config.clone(), store)?;
    let optimizer = match manifest.optimizer_step {
        Some(step) => {
            let mut read_all = || -> Result<Vec<Tensor<R>>> {
                (0..manifest.params.len())
                    .map(|_| read_record::<R>(bytes, &mut pos).map(|(_, t)| t))
                    .collect()
            };
            let m = read_all()?;
            let v = read_all()?;
            Some(AdamState { step, m, v })
        }
        None => None,
    };
    let carry = match &manifest.carry {
        Some(c) => {
            let mut read_n = |n: usize| -> Result<Vec<Tensor<R>>> {
                (0..n).map(|_| read_record::<R>(bytes, &mut pos).map(|(_, t)| t)).collect()
            };
            let memory = read_n(c.memory)?;
            let states = read_n(c.states)?;
            Some(CarrySnapshot {
                batch: c.batch,
                segments: c.segments,
                memory,
                states,
            })
        }
        None => None,
    };
    if pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after last record".into()));
    }
    Ok(Checkpoint {
        model,
        optimizer,
        carry,
        extra: manifest.extra,
    })
}

pub fn load_checkpoint<R: Real>(path: &Path) -> Result<Checkpoint<R>> {
    decode_checkpoint(&fs::read(path)?)
}

/// Loads and rejects checkpoints whose model config differs from `expected`.
pub fn load_checkpoint_matching<R: Real>(path: &Path, expected: &ModelConfig) -> Result<Checkpoint<R>> {
    let manifest = read_manifest(path)?;
    if &manifest.config != expected {
        let a = serde_json::to_value(&manifest.config)?;
        let b = serde_json::to_value(expected)?;
        let fields: Vec<String> = match (a, b) {
            (serde_json::Value::Object(a), serde_json::Value::Object(b)) => a
                .iter()
                .filter(|(k, v)| b.get(*k) != Some(v))
                .map(|(k, _)| k.clone())
                .collect(),
            _ => vec![],
        };
        return Err(Error::Checkpoint(format!(
            "config mismatch in field(s): {}",
            fields.join(", ")
        )));
    }
    load_checkpoint(path)
}
