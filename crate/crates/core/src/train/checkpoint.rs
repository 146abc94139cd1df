//! Versioned checkpoint container: `VICK`, a `u32` version, a `u64` header
//! length, a JSON header, then every tensor as little-endian `f64` in
//! header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use vaeinfo_tensor::Array;

use super::adam::Adam;
use super::{TrainConfig, TrainingState};
use crate::error::{Error, Result};
use crate::model::{Entry, Model, ModelConfig, ModelKind, ParamStore};

pub const MAGIC: [u8; 4] = *b"VICK";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Group {
    Param,
    Buffer,
    AdamDM,
    AdamDV,
    AdamGM,
    AdamGV,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    group: Group,
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainingHeader {
    config: TrainConfig,
    step: u64,
    epoch: usize,
    adam_d_t: u64,
    adam_g_t: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    kind: ModelKind,
    training: Option<TrainingHeader>,
    tensors: Vec<TensorEntry>,
}

fn encode(model: &Model, training: Option<(&TrainingState, &TrainConfig)>) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut payload: Vec<&Array> = Vec::new();
    for (name, e) in &model.params.entries {
        let group = if e.trainable { Group::Param } else { Group::Buffer };
        tensors.push(TensorEntry { group, name: name.clone(), shape: e.value.shape().to_vec() });
        payload.push(&e.value);
    }
    let header_training = training.map(|(state, cfg)| {
        for (adam, gm, gv) in [(&state.adam_d, Group::AdamDM, Group::AdamDV), (&state.adam_g, Group::AdamGM, Group::AdamGV)] {
            for (group, map) in [(gm, &adam.m), (gv, &adam.v)] {
                for (name, a) in map {
                    tensors.push(TensorEntry { group, name: name.clone(), shape: a.shape().to_vec() });
                    payload.push(a);
                }
            }
        }
        TrainingHeader { config: cfg.clone(), step: state.step, epoch: state.epoch, adam_d_t: state.adam_d.t, adam_g_t: state.adam_g.t }
    });
    let header = Header { model: model.config.clone(), kind: model.kind, training: header_training, tensors };
    let json = serde_json::to_vec(&header)?;
    let n: usize = payload.iter().map(|a| a.len()).sum();
    let mut out = Vec::with_capacity(16 + json.len() + 8 * n);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for a in payload {
        for v in a.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Decoded {
    model: Model,
    training: Option<(TrainingState, TrainConfig)>,
}

fn decode(bytes: &[u8]) -> Result<Decoded> {
    if bytes.len() < 16 || bytes[..4] != MAGIC {
        return Err(Error::format("magic", "not a checkpoint"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::format("version", format!("unsupported version {version}")));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let json = bytes.get(16..16 + len).ok_or_else(|| Error::format("header", "truncated"))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| Error::format("header", e.to_string()))?;
    header.model.validate()?;
    let mut rest = &bytes[16 + len..];
    let mut params = ParamStore::default();
    let (mut adam_d, mut adam_g) = (Adam::default(), Adam::default());
    for t in header.tensors {
        let n: usize = t.shape.iter().product();
        if rest.len() < 8 * n {
            return Err(Error::format("payload", format!("truncated at {}", t.name)));
        }
        let data = rest[..8 * n].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        rest = &rest[8 * n..];
        let value = Array::new(t.shape, data);
        match t.group {
            Group::Param | Group::Buffer => {
                params.entries.insert(t.name, Entry { value, trainable: t.group == Group::Param });
            }
            Group::AdamDM => drop(adam_d.m.insert(t.name, value)),
            Group::AdamDV => drop(adam_d.v.insert(t.name, value)),
            Group::AdamGM => drop(adam_g.m.insert(t.name, value)),
            Group::AdamGV => drop(adam_g.v.insert(t.name, value)),
        }
    }
    if !rest.is_empty() {
        return Err(Error::format("payload", format!("{} trailing bytes", rest.len())));
    }
    let model = Model { config: header.model, kind: header.kind, params };
    let training = header.training.map(|h| {
        adam_d.t = h.adam_d_t;
        adam_g.t = h.adam_g_t;
        (TrainingState { step: h.step, epoch: h.epoch, model: model.clone(), adam_d, adam_g }, h.config)
    });
    Ok(Decoded { model, training })
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Parameters and configuration only.
pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode(model, None)?)
}

/// Full training state, resumable with [`load_state`].
pub fn save_state(state: &TrainingState, cfg: &TrainConfig, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode(&state.model, Some((state, cfg)))?)
}

/// The model of any checkpoint, with or without training state.
pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode(&bytes)?.model)
}

pub fn load_state(path: impl AsRef<Path>) -> Result<(TrainingState, TrainConfig)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)?.training.ok_or_else(|| Error::format("header", "checkpoint holds no training state"))
}
