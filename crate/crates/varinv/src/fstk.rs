//! Field-stack files: one JSON header line followed by the little-endian
//! 32-bit payload of every named field, in header order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use varinv_core::fields::{FieldStack, GridSpec};

use crate::error::{AppError, Result};

pub const MAGIC: &str = "FSTK1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub magic: String,
    /// `[T, H, W]`.
    pub dims: [usize; 3],
    pub dx: f64,
    pub dt: f64,
    pub fields: Vec<String>,
}

/// Named stacks on one grid.
pub type Fields = BTreeMap<String, FieldStack>;

pub fn encode(fields: &Fields) -> std::result::Result<Vec<u8>, String> {
    let grid = match fields.values().next() {
        Some(f) => *f.grid(),
        None => GridSpec::unit(0, 0, 0),
    };
    if let Some((name, _)) = fields.iter().find(|(_, f)| *f.grid() != grid) {
        return Err(format!("field `{name}` is not on the grid of the others"));
    }
    let header = Header {
        magic: MAGIC.into(),
        dims: [grid.n_t, grid.n_y, grid.n_x],
        dx: grid.dx,
        dt: grid.dt,
        fields: fields.keys().cloned().collect(),
    };
    let mut out = serde_json::to_vec(&header).map_err(|e| e.to_string())?;
    out.push(b'\n');
    for f in fields.values() {
        out.extend(f.data().iter().flat_map(|v| v.to_le_bytes()));
    }
    Ok(out)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Fields> {
    let header_err = |msg: String| AppError::Header { path: path.into(), msg };
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| header_err("no header line".into()))?;
    let raw: serde_json::Value = serde_json::from_slice(&bytes[..nl]).map_err(|e| header_err(e.to_string()))?;
    let magic = raw.get("magic").and_then(|m| m.as_str()).unwrap_or("");
    if magic != MAGIC {
        return Err(AppError::BadMagic { path: path.into(), found: magic.into(), expected: MAGIC });
    }
    let h: Header = serde_json::from_value(raw).map_err(|e| header_err(e.to_string()))?;
    let payload = &bytes[nl + 1..];
    let per = h.dims.iter().product::<usize>();
    let expected = per * h.fields.len() * 4;
    if payload.len() < expected {
        return Err(AppError::Truncated { path: path.into(), expected, found: payload.len() });
    }
    if payload.len() > expected {
        return Err(AppError::Dims {
            path: path.into(),
            msg: format!("{} payload bytes for dims {:?} × {} fields", payload.len(), h.dims, h.fields.len()),
        });
    }
    let mut out = Fields::new();
    if h.fields.is_empty() {
        return Ok(out);
    }
    let grid = GridSpec::new(h.dims[0], h.dims[1], h.dims[2], h.dx, h.dt).map_err(|e| header_err(e.to_string()))?;
    for (k, name) in h.fields.iter().enumerate() {
        let chunk = &payload[k * per * 4..(k + 1) * per * 4];
        let data = chunk.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        if out.insert(name.clone(), FieldStack::new(grid, data)?).is_some() {
            return Err(header_err(format!("duplicate field `{name}`")));
        }
    }
    Ok(out)
}

pub fn write_fstk(path: &Path, fields: &Fields) -> Result<()> {
    let bytes = encode(fields).map_err(|msg| AppError::Dims { path: path.into(), msg })?;
    std::fs::write(path, bytes).map_err(AppError::io(path))
}

pub fn read_fstk(path: &Path) -> Result<Fields> {
    if !path.exists() {
        return Err(AppError::Missing(path.into()));
    }
    let bytes = std::fs::read(path).map_err(AppError::io(path))?;
    decode(&bytes, path)
}

/// Reads one named field, or fails with a dimension error naming the file.
pub fn take(fields: &mut Fields, name: &str, path: &Path) -> Result<FieldStack> {
    fields.remove(name).ok_or_else(|| AppError::Dims { path: path.into(), msg: format!("no field `{name}`") })
}
