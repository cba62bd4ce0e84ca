//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "TIE1" | u32 version | u64 header length | header JSON
//!        | f64 payloads in manifest order | u32 CRC32 of the payloads
//! ```
//!
//! The header carries the model and training configuration, vocabulary,
//! instruction pool, dataset label spaces, run position, Adam step counts
//! and a manifest of every tensor (name, dtype, dims, byte offset into the
//! payload region). Tensors are the parameters, Adam's two moments and the
//! gate's gradient snapshot. Saving is deterministic, so two identical runs
//! produce identical files.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gate::{Gate, GateMode};
use crate::instruction::InstructionPool;
use crate::model::{Model, ModelConfig};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::trainer::{DatasetInfo, GateTally, RunState, TrainConfig, Trainer};
use crate::vocab::Vocabulary;

pub const MAGIC: &[u8; 4] = b"TIE1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    /// Parameter group; empty for optimizer and gate tensors.
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub group: String,
    pub dtype: String,
    pub dims: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub state: RunState,
    pub tally: GateTally,
    pub adam: AdamConfig,
    pub adam_steps: Vec<u64>,
    pub gate: GateMode,
    pub vocab: Vocabulary,
    pub pool: InstructionPool,
    pub datasets: BTreeMap<String, DatasetInfo>,
    pub tensors: Vec<TensorEntry>,
}

const PARAM: &str = "param/";
const MOMENT1: &str = "adam.m/";
const MOMENT2: &str = "adam.v/";
const SNAPSHOT: &str = "gate/";

pub fn to_bytes(t: &Trainer) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let mut put = |name: String, group: &str, value: &Tensor, payload: &mut Vec<u8>| {
        tensors.push(TensorEntry {
            name,
            group: group.to_string(),
            dtype: "f64".into(),
            dims: value.shape().to_vec(),
            offset: payload.len() as u64,
        });
        for v in value.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    };
    for p in t.model.params.iter() {
        put(format!("{PARAM}{}", p.name), &p.group, &p.value, &mut payload);
    }
    for (i, p) in t.model.params.iter().enumerate() {
        put(format!("{MOMENT1}{}", p.name), "", &t.adam.m[i], &mut payload);
        put(format!("{MOMENT2}{}", p.name), "", &t.adam.v[i], &mut payload);
    }
    if let Some(snap) = &t.gate.snapshot {
        for (i, p) in t.model.params.iter().enumerate() {
            put(format!("{SNAPSHOT}{}", p.name), "", &snap[i], &mut payload);
        }
    }
    let header = Header {
        model: t.model.config.clone(),
        train: t.config.clone(),
        state: t.state,
        tally: t.tally.clone(),
        adam: t.adam.config,
        adam_steps: t.adam.steps.clone(),
        gate: t.gate.mode,
        vocab: t.vocab.clone(),
        pool: t.pool.clone(),
        datasets: t.datasets.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    Ok(out)
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Splits a checkpoint into its header and payload region after checking
/// magic, version and CRC.
pub fn read_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < 20 || &bytes[..4] != MAGIC {
        return Err(corrupt("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(corrupt(format!("unsupported checkpoint version {version}")));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if body.len() < len + 4 {
        return Err(corrupt("truncated header"));
    }
    let header: Header = serde_json::from_slice(&body[..len])?;
    let payload = &body[len..body.len() - 4];
    let stored = u32::from_le_bytes(body[body.len() - 4..].try_into().expect("4 bytes"));
    if crc32fast::hash(payload) != stored {
        return Err(corrupt("payload CRC mismatch"));
    }
    Ok((header, payload))
}

pub fn from_bytes(bytes: &[u8]) -> Result<Trainer> {
    let (h, payload) = read_header(bytes)?;
    let mut by_name: BTreeMap<&str, (&TensorEntry, Tensor)> = BTreeMap::new();
    for e in &h.tensors {
        if e.dtype != "f64" {
            return Err(corrupt(format!("tensor {} has unsupported dtype {}", e.name, e.dtype)));
        }
        let numel: usize = e.dims.iter().product();
        let start = e.offset as usize;
        let end = start + 8 * numel;
        let raw = payload
            .get(start..end)
            .ok_or_else(|| corrupt(format!("tensor {} runs past the payload", e.name)))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        by_name.insert(e.name.as_str(), (e, Tensor::new(e.dims.clone(), data)?));
    }

    // The configuration fixes the parameter list; the file must match it.
    let reference = Model::new(h.model.clone(), &mut rand::rngs::mock::StepRng::new(0, 1))?;
    let mut params = ParamStore::new();
    let mut take = |name: String| {
        by_name
            .remove(name.as_str())
            .ok_or_else(|| corrupt(format!("missing tensor {name}")))
    };
    let mut m = Vec::new();
    let mut v = Vec::new();
    let mut snapshot = Vec::new();
    for p in reference.params.iter() {
        let (entry, value) = take(format!("{PARAM}{}", p.name))?;
        if value.shape() != p.value.shape() || entry.group != p.group {
            return Err(corrupt(format!("parameter {} does not match the model config", p.name)));
        }
        params.push(&p.group, &p.name, value);
        m.push(take(format!("{MOMENT1}{}", p.name))?.1);
        v.push(take(format!("{MOMENT2}{}", p.name))?.1);
        if let Ok((_, s)) = take(format!("{SNAPSHOT}{}", p.name)) {
            snapshot.push(s);
        }
    }
    if !snapshot.is_empty() && snapshot.len() != params.len() {
        return Err(corrupt("partial gate snapshot"));
    }
    if h.adam_steps.len() != params.len() {
        return Err(corrupt("adam step counts do not match the parameter list"));
    }
    Ok(Trainer {
        model: Model {
            config: h.model,
            params,
        },
        vocab: h.vocab,
        pool: h.pool,
        datasets: h.datasets,
        config: h.train,
        adam: Adam {
            config: h.adam,
            m,
            v,
            steps: h.adam_steps,
        },
        gate: Gate {
            mode: h.gate,
            snapshot: (!snapshot.is_empty()).then_some(snapshot),
        },
        state: h.state,
        tally: h.tally,
    })
}

pub fn save(t: &Trainer, path: &Path) -> Result<()> {
    let bytes = to_bytes(t)?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Trainer> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
