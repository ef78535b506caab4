//! CSV diagnostics.

use std::path::Path;

use serde::Serialize;
use varinv_core::metrics::ResolvedScale;
use varinv_core::train::EpochRecord;

use crate::error::{AppError, Result};

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> AppError + '_ {
    move |e| AppError::Io { path: path.into(), source: std::io::Error::other(e) }
}

fn write_rows<R: Serialize>(path: &Path, rows: impl IntoIterator<Item = R>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    for r in rows {
        w.serialize(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(AppError::io(path))
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    write_rows(path, history)
}

#[derive(Serialize)]
struct TraceRow {
    window_start: usize,
    iteration: usize,
    cost: f64,
}

/// Solver cost per iteration for each reconstructed window.
pub fn write_traces(path: &Path, traces: &[(usize, Vec<f64>)]) -> Result<()> {
    let rows = traces.iter().flat_map(|(s, c)| c.iter().enumerate().map(|(i, v)| TraceRow { window_start: *s, iteration: i, cost: *v }));
    write_rows(path, rows)
}

#[derive(Serialize)]
struct NsrRow {
    frequency: f64,
    wavelength: f64,
    nsr: f64,
}

pub fn write_nsr(path: &Path, r: &ResolvedScale) -> Result<()> {
    write_rows(path, r.nsr.iter().map(|&(f, n)| NsrRow { frequency: f, wavelength: 1.0 / f, nsr: n }))
}
