//! Training checkpoints: a JSON header line listing every tensor, then the
//! little-endian 64-bit payloads in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};
use varinv_core::gradcore::{ParamStore, Shape, Tensor};
use varinv_core::train::{AdamState, EpochRecord, TrainState};

use crate::error::{AppError, Result};

pub const MAGIC: &str = "PSTK1";

/// Sections in payload order.
const SECTIONS: [&str; 4] = ["params", "adam_m", "adam_v", "best_params"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    section: String,
    name: String,
    shape: [usize; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    magic: String,
    epoch: usize,
    adam_t: u64,
    best_val: Option<f64>,
    history: Vec<EpochRecord>,
    tensors: Vec<Entry>,
}

fn stores(s: &TrainState) -> [&ParamStore; 4] {
    [&s.params, &s.adam.m, &s.adam.v, &s.best_params]
}

pub fn encode(state: &TrainState) -> Vec<u8> {
    let mut tensors = vec![];
    for (sec, store) in SECTIONS.iter().zip(stores(state)) {
        for (name, t) in store.iter() {
            tensors.push(Entry { section: sec.to_string(), name: name.clone(), shape: t.shape().0 });
        }
    }
    let header = Header {
        magic: MAGIC.into(),
        epoch: state.epoch,
        adam_t: state.adam.t,
        best_val: state.best_val,
        history: state.history.clone(),
        tensors,
    };
    let mut out = serde_json::to_vec(&header).expect("checkpoint header serializes");
    out.push(b'\n');
    for store in stores(state) {
        for (_, t) in store.iter() {
            out.extend(t.data().iter().flat_map(|v| v.to_le_bytes()));
        }
    }
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<TrainState> {
    let header_err = |msg: String| AppError::Header { path: path.into(), msg };
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| header_err("no header line".into()))?;
    let raw: serde_json::Value = serde_json::from_slice(&bytes[..nl]).map_err(|e| header_err(e.to_string()))?;
    let magic = raw.get("magic").and_then(|m| m.as_str()).unwrap_or("");
    if magic != MAGIC {
        return Err(AppError::BadMagic { path: path.into(), found: magic.into(), expected: MAGIC });
    }
    let h: Header = serde_json::from_value(raw).map_err(|e| header_err(e.to_string()))?;
    let payload = &bytes[nl + 1..];
    let expected = h.tensors.iter().map(|e| e.shape.iter().product::<usize>() * 8).sum::<usize>();
    if payload.len() != expected {
        return Err(AppError::Truncated { path: path.into(), expected, found: payload.len() });
    }
    let mut out: [ParamStore; 4] = Default::default();
    let mut at = 0;
    for e in &h.tensors {
        let k = SECTIONS.iter().position(|s| *s == e.section).ok_or_else(|| header_err(format!("unknown section `{}`", e.section)))?;
        let n = e.shape.iter().product::<usize>();
        let data = payload[at..at + 8 * n].chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        at += 8 * n;
        out[k].insert(e.name.clone(), Tensor::from_vec(Shape(e.shape), data)?);
    }
    let [params, m, v, best_params] = out;
    if m.len() != params.len() || v.len() != params.len() || best_params.len() != params.len() {
        return Err(header_err("sections list different tensors".into()));
    }
    Ok(TrainState {
        params,
        adam: AdamState { m, v, t: h.adam_t },
        epoch: h.epoch,
        history: h.history,
        best_val: h.best_val,
        best_params,
    })
}

pub fn save(path: &Path, state: &TrainState) -> Result<()> {
    // write then rename so an interrupted save never leaves a torn checkpoint
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, encode(state)).map_err(AppError::io(&tmp))?;
    std::fs::rename(&tmp, path).map_err(AppError::io(path))
}

pub fn load(path: &Path) -> Result<TrainState> {
    if !path.exists() {
        return Err(AppError::Missing(path.into()));
    }
    let bytes = std::fs::read(path).map_err(AppError::io(path))?;
    decode(&bytes, path)
}
