//! Grid, state and observation containers plus the discrete calculus shared
//! by the observation operators, the losses and the metrics.
//!
//! Rasters are stored row-major with time slowest (`t`, then `y`, then `x`).
//! Missing data never appears as NaN: it is carried by {0,1} masks.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::{Shape, Tensor};

/// Uniform space-time grid. `dx` is in degrees, `dt` in days.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub n_t: usize,
    pub n_y: usize,
    pub n_x: usize,
    pub dx: f64,
    pub dt: f64,
}

impl GridSpec {
    pub fn new(n_t: usize, n_y: usize, n_x: usize, dx: f64, dt: f64) -> Result<Self> {
        let g = GridSpec { n_t, n_y, n_x, dx, dt };
        g.validate()?;
        Ok(g)
    }

    /// Unit-spacing grid, handy for tests and small probes.
    pub fn unit(n_t: usize, n_y: usize, n_x: usize) -> Self {
        GridSpec { n_t, n_y, n_x, dx: 1.0, dt: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_t == 0 || self.n_y == 0 || self.n_x == 0 {
            return Err(Error::Config(format!("empty grid {}x{}x{}", self.n_t, self.n_y, self.n_x)));
        }
        if !(self.dx > 0.0 && self.dt > 0.0 && self.dx.is_finite() && self.dt.is_finite()) {
            return Err(Error::Config(format!("grid steps must be positive (dx={}, dt={})", self.dx, self.dt)));
        }
        Ok(())
    }

    pub fn frame_len(&self) -> usize {
        self.n_y * self.n_x
    }

    pub fn len(&self) -> usize {
        self.n_t * self.frame_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn with_frames(&self, n_t: usize) -> Self {
        GridSpec { n_t, ..*self }
    }

    #[inline]
    pub fn index(&self, t: usize, y: usize, x: usize) -> usize {
        (t * self.n_y + y) * self.n_x + x
    }
}

/// A T×H×W single-channel raster of 32-bit values.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldStack {
    grid: GridSpec,
    data: Vec<f32>,
}

impl FieldStack {
    pub fn new(grid: GridSpec, data: Vec<f32>) -> Result<Self> {
        grid.validate()?;
        if data.len() != grid.len() {
            return Err(Error::Shape(format!(
                "field data has {} values, grid {}x{}x{} needs {}",
                data.len(),
                grid.n_t,
                grid.n_y,
                grid.n_x,
                grid.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("field data".into()));
        }
        Ok(FieldStack { grid, data })
    }

    pub fn zeros(grid: GridSpec) -> Self {
        FieldStack { grid, data: vec![0.0; grid.len()] }
    }

    pub fn filled(grid: GridSpec, value: f32) -> Self {
        FieldStack { grid, data: vec![value; grid.len()] }
    }

    pub fn from_fn(grid: GridSpec, mut f: impl FnMut(usize, usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(grid.len());
        for t in 0..grid.n_t {
            for y in 0..grid.n_y {
                for x in 0..grid.n_x {
                    data.push(f(t, y, x));
                }
            }
        }
        Self::new(grid, data)
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, t: usize, y: usize, x: usize) -> f32 {
        self.data[self.grid.index(t, y, x)]
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.grid.frame_len();
        &self.data[t * n..(t + 1) * n]
    }

    /// Frames `start..start+len` as a new stack.
    pub fn frames(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.grid.n_t {
            return Err(Error::Shape(format!(
                "frames {}..{} out of range for {} frames",
                start,
                start + len,
                self.grid.n_t
            )));
        }
        let n = self.grid.frame_len();
        Ok(FieldStack {
            grid: self.grid.with_frames(len),
            data: self.data[start * n..(start + len) * n].to_vec(),
        })
    }

    /// Spatial window `[y0, y0+h) × [x0, x0+w)` of every frame.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        let g = self.grid;
        if h == 0 || w == 0 || y0 + h > g.n_y || x0 + w > g.n_x {
            return Err(Error::Shape(format!("crop {h}x{w} at ({y0}, {x0}) outside {}x{}", g.n_y, g.n_x)));
        }
        let mut data = Vec::with_capacity(g.n_t * h * w);
        for t in 0..g.n_t {
            for y in y0..y0 + h {
                let start = g.index(t, y, x0);
                data.extend_from_slice(&self.data[start..start + w]);
            }
        }
        Ok(FieldStack { grid: GridSpec { n_y: h, n_x: w, ..g }, data })
    }

    /// Concatenates stacks along time. All grids must agree spatially.
    pub fn concat_frames(parts: &[FieldStack]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::Shape("no frames to concatenate".into()))?;
        let mut data = Vec::new();
        let mut n_t = 0;
        for p in parts {
            if p.grid.with_frames(1) != first.grid.with_frames(1) {
                return Err(Error::GridMismatch("spatial grids differ".into()));
            }
            n_t += p.grid.n_t;
            data.extend_from_slice(&p.data);
        }
        Ok(FieldStack { grid: first.grid.with_frames(n_t), data })
    }

    pub fn map(&self, mut f: impl FnMut(f32) -> f32) -> Result<Self> {
        Self::new(self.grid, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_with(&self, other: &FieldStack, f: impl Fn(f32, f32) -> f32) -> Result<Self> {
        ensure_same_grid(&self.grid, &other.grid)?;
        Self::new(self.grid, self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect())
    }

    /// Lifts the stack to a `[1, T, H, W]` engine tensor.
    pub fn to_tensor(&self) -> Tensor {
        let g = &self.grid;
        Tensor::from_vec(
            Shape::new(1, g.n_t, g.n_y, g.n_x),
            self.data.iter().map(|&v| v as f64).collect(),
        )
        .expect("grid and tensor sizes agree")
    }

    /// Inverse of [`FieldStack::to_tensor`]; the tensor must hold `n_t` channels.
    pub fn from_tensor(grid: GridSpec, t: &Tensor) -> Result<Self> {
        if t.numel() != grid.len() {
            return Err(Error::Shape(format!("tensor {:?} does not fit grid", t.shape())));
        }
        Self::new(grid, t.data().iter().map(|&v| v as f32).collect())
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|&v| (v as f64) * (v as f64)).sum()
    }
}

pub(crate) fn ensure_same_grid(a: &GridSpec, b: &GridSpec) -> Result<()> {
    if a != b {
        return Err(Error::GridMismatch(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.n_t, a.n_y, a.n_x, b.n_t, b.n_y, b.n_x
        )));
    }
    Ok(())
}

/// Two-scale state: a large-scale component plus a fine-scale anomaly.
#[derive(Clone, Debug, PartialEq)]
pub struct StateSeq {
    pub xbar: FieldStack,
    pub dx: FieldStack,
}

impl StateSeq {
    pub fn new(xbar: FieldStack, dx: FieldStack) -> Result<Self> {
        ensure_same_grid(xbar.grid(), dx.grid())?;
        Ok(StateSeq { xbar, dx })
    }

    pub fn zeros(grid: GridSpec) -> Self {
        StateSeq { xbar: FieldStack::zeros(grid), dx: FieldStack::zeros(grid) }
    }

    pub fn grid(&self) -> &GridSpec {
        self.xbar.grid()
    }

    /// Packs both components into one `[1, 2T, H, W]` tensor (x̄ channels first).
    pub fn to_tensor(&self) -> Tensor {
        let g = self.grid();
        let mut data: Vec<f64> = self.xbar.data().iter().map(|&v| v as f64).collect();
        data.extend(self.dx.data().iter().map(|&v| v as f64));
        Tensor::from_vec(Shape::new(1, 2 * g.n_t, g.n_y, g.n_x), data).expect("state packing")
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        Ok(StateSeq { xbar: self.xbar.crop(y0, x0, h, w)?, dx: self.dx.crop(y0, x0, h, w)? })
    }

    pub fn from_tensor(grid: GridSpec, t: &Tensor) -> Result<Self> {
        if t.numel() != 2 * grid.len() {
            return Err(Error::Shape(format!("tensor {:?} does not hold a two-component state", t.shape())));
        }
        let n = grid.len();
        let xbar = FieldStack::new(grid, t.data()[..n].iter().map(|&v| v as f32).collect())?;
        let dx = FieldStack::new(grid, t.data()[n..].iter().map(|&v| v as f32).collect())?;
        Ok(StateSeq { xbar, dx })
    }
}

/// Elementwise sum x̄ + δx: the physical field.
pub fn composite(s: &StateSeq) -> Result<FieldStack> {
    s.xbar.zip_with(&s.dx, |a, b| a + b)
}

/// One observation modality: values with a binary mask, zero outside the mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ObsModality {
    pub id: usize,
    values: FieldStack,
    mask: FieldStack,
}

impl ObsModality {
    /// Builds a modality and puts it in canonical form (values zeroed off-mask).
    pub fn new(id: usize, values: FieldStack, mask: FieldStack) -> Result<Self> {
        ensure_same_grid(values.grid(), mask.grid())?;
        if mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::Config(format!("mask of modality {id} is not binary")));
        }
        let values = values.zip_with(&mask, |v, m| if m == 0.0 { 0.0 } else { v })?;
        Ok(ObsModality { id, values, mask })
    }

    /// Gap-free modality (mask ≡ 1).
    pub fn full(id: usize, values: FieldStack) -> Self {
        let mask = FieldStack::filled(*values.grid(), 1.0);
        ObsModality { id, values, mask }
    }

    pub fn values(&self) -> &FieldStack {
        &self.values
    }

    pub fn mask(&self) -> &FieldStack {
        &self.mask
    }

    pub fn grid(&self) -> &GridSpec {
        self.values.grid()
    }

    pub fn observed_count(&self) -> usize {
        self.mask.data().iter().filter(|&&m| m != 0.0).count()
    }

    pub fn frames(&self, start: usize, len: usize) -> Result<Self> {
        Ok(ObsModality { id: self.id, values: self.values.frames(start, len)?, mask: self.mask.frames(start, len)? })
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        Ok(ObsModality { id: self.id, values: self.values.crop(y0, x0, h, w)?, mask: self.mask.crop(y0, x0, h, w)? })
    }
}

/// Ordered set of modalities with unique ids on one grid.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ObsSet {
    modalities: Vec<ObsModality>,
}

impl ObsSet {
    pub fn new(modalities: Vec<ObsModality>) -> Result<Self> {
        for (i, m) in modalities.iter().enumerate() {
            if modalities[..i].iter().any(|o| o.id == m.id) {
                return Err(Error::Config(format!("duplicate modality id {}", m.id)));
            }
            ensure_same_grid(modalities[0].grid(), m.grid())?;
        }
        Ok(ObsSet { modalities })
    }

    pub fn get(&self, id: usize) -> Option<&ObsModality> {
        self.modalities.iter().find(|m| m.id == id)
    }

    pub fn require(&self, id: usize) -> Result<&ObsModality> {
        self.get(id).ok_or(Error::MissingModality(id))
    }

    pub fn modalities(&self) -> &[ObsModality] {
        &self.modalities
    }

    pub fn grid(&self) -> Option<&GridSpec> {
        self.modalities.first().map(|m| m.grid())
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        let modalities = self.modalities.iter().map(|m| m.crop(y0, x0, h, w)).collect::<Result<Vec<_>>>()?;
        Ok(ObsSet { modalities })
    }

    pub fn frames(&self, start: usize, len: usize) -> Result<Self> {
        let modalities = self.modalities.iter().map(|m| m.frames(start, len)).collect::<Result<Vec<_>>>()?;
        Ok(ObsSet { modalities })
    }

    /// Drops a modality, e.g. to build the SSH-only variant of an experiment.
    pub fn without(&self, id: usize) -> Self {
        ObsSet { modalities: self.modalities.iter().filter(|m| m.id != id).cloned().collect() }
    }
}

/// Central differences inside, one-sided first-order differences on the edges.
/// Works on one row/column of `n` samples spaced `stride` apart.
#[inline]
pub(crate) fn diff_line(src: &[f64], dst: &mut [f64], offset: usize, stride: usize, n: usize, h: f64) {
    let at = |i: usize| src[offset + i * stride];
    if n == 1 {
        dst[offset] = 0.0;
        return;
    }
    dst[offset] = (at(1) - at(0)) / h;
    for i in 1..n - 1 {
        dst[offset + i * stride] = (at(i + 1) - at(i - 1)) / (2.0 * h);
    }
    dst[offset + (n - 1) * stride] = (at(n - 1) - at(n - 2)) / h;
}

/// Spatial gradient `(∂f/∂x, ∂f/∂y)` frame by frame.
pub fn spatial_gradient(f: &FieldStack) -> Result<(FieldStack, FieldStack)> {
    let g = *f.grid();
    if g.n_y < 2 || g.n_x < 2 {
        return Err(Error::UnsupportedShape(format!("spatial gradient needs at least 2x2 frames, got {}x{}", g.n_y, g.n_x)));
    }
    let src: Vec<f64> = f.data().iter().map(|&v| v as f64).collect();
    let mut gx = vec![0.0; src.len()];
    let mut gy = vec![0.0; src.len()];
    for t in 0..g.n_t {
        let base = t * g.frame_len();
        for y in 0..g.n_y {
            diff_line(&src, &mut gx, base + y * g.n_x, 1, g.n_x, g.dx);
        }
        for x in 0..g.n_x {
            diff_line(&src, &mut gy, base + x, g.n_x, g.n_y, g.dx);
        }
    }
    Ok((
        FieldStack::new(g, gx.iter().map(|&v| v as f32).collect())?,
        FieldStack::new(g, gy.iter().map(|&v| v as f32).collect())?,
    ))
}

/// Forward difference in time; the last frame repeats the previous difference.
pub fn temporal_difference(f: &FieldStack) -> Result<FieldStack> {
    let g = *f.grid();
    if g.n_t < 2 {
        return Err(Error::UnsupportedShape("temporal difference needs at least 2 frames".into()));
    }
    let n = g.frame_len();
    let mut out = vec![0.0f32; g.len()];
    for t in 0..g.n_t - 1 {
        for i in 0..n {
            let d = (f.data()[(t + 1) * n + i] as f64 - f.data()[t * n + i] as f64) / g.dt;
            out[t * n + i] = d as f32;
        }
    }
    let (head, last) = out.split_at_mut((g.n_t - 1) * n);
    last.copy_from_slice(&head[(g.n_t - 2) * n..]);
    FieldStack::new(g, out)
}
