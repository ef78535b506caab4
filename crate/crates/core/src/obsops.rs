//! Observation terms of the variational cost: masked identity residuals on
//! the sparse altimetry, a large-scale residual against the gap-free
//! interpolated product, learned feature-pair residuals for the companion
//! tracer and an optional tracer-advection residual.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{composite, ensure_same_grid, spatial_gradient, temporal_difference, FieldStack, GridSpec, ObsModality, ObsSet, StateSeq};
use crate::gradcore::{normal_tensor, BoundParams, NodeId, ParamStore, Shape, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TermKind {
    MaskedIdentity,
    LargeScale,
    FeaturePair,
    Advection,
}

fn default_kernel() -> usize {
    3
}
fn default_channels() -> usize {
    8
}
fn default_velocity_scale() -> f64 {
    1.0
}

/// One observation term `λ_{m,n} ‖G_{m,n}(y_m, x)‖²`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObsTermSpec {
    pub modality: usize,
    pub index: usize,
    pub kind: TermKind,
    pub weight: f64,
    /// Parameter key prefix (feature-pair terms); defaults to `obs.g{m}{n}`.
    #[serde(default)]
    pub params: Option<String>,
    /// Feature count (feature-pair terms).
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    /// Constant mapping SSH gradients to velocity (advection terms).
    #[serde(default = "default_velocity_scale")]
    pub velocity_scale: f64,
}

impl ObsTermSpec {
    pub fn new(modality: usize, index: usize, kind: TermKind, weight: f64) -> Self {
        ObsTermSpec {
            modality,
            index,
            kind,
            weight,
            params: None,
            channels: default_channels(),
            kernel: default_kernel(),
            velocity_scale: default_velocity_scale(),
        }
    }

    pub fn id(&self) -> String {
        format!("g{}.{}", self.modality, self.index)
    }

    pub fn param_prefix(&self) -> String {
        self.params.clone().unwrap_or_else(|| format!("obs.g{}{}", self.modality, self.index))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.weight >= 0.0 && self.weight.is_finite()) {
            return Err(Error::Config(format!("term {} has invalid weight {}", self.id(), self.weight)));
        }
        if self.kind == TermKind::FeaturePair && (self.channels == 0 || self.kernel % 2 == 0) {
            return Err(Error::Config(format!("feature-pair term {} needs channels > 0 and an odd kernel", self.id())));
        }
        Ok(())
    }

    fn kernel_names(&self) -> (String, String) {
        let p = self.param_prefix();
        (format!("{p}.k1"), format!("{p}.k2"))
    }
}

/// Seeded feature-pair kernels `K¹, K²: [F, 1, k, k]` for every feature-pair term.
pub fn init_obs_params(terms: &[ObsTermSpec], seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamStore::new();
    for t in terms.iter().filter(|t| t.kind == TermKind::FeaturePair) {
        let shape = Shape::new(t.channels, 1, t.kernel, t.kernel);
        let std = 1.0 / t.kernel as f64;
        let (k1, k2) = t.kernel_names();
        p.insert(k1, normal_tensor(&mut rng, shape, std));
        p.insert(k2, normal_tensor(&mut rng, shape, std));
    }
    p
}

/// Observation data lifted onto a tape as constants, plus the derived
/// quantities the advection term needs.
pub struct ObsConstants {
    grid: GridSpec,
    nodes: BTreeMap<usize, (NodeId, NodeId)>,
    all_observed: BTreeMap<usize, bool>,
    advection: BTreeMap<usize, [NodeId; 3]>,
}

impl ObsConstants {
    pub fn new(tape: &mut Tape, obs: &ObsSet, terms: &[ObsTermSpec]) -> Result<Self> {
        let grid = *obs.grid().ok_or_else(|| Error::Config("empty observation set".into()))?;
        let mut nodes = BTreeMap::new();
        let mut all_observed = BTreeMap::new();
        let mut advection = BTreeMap::new();
        for t in terms {
            let m = obs.require(t.modality)?;
            if !nodes.contains_key(&t.modality) {
                let v = tape.constant(m.values().to_tensor());
                let k = tape.constant(m.mask().to_tensor());
                nodes.insert(t.modality, (v, k));
                all_observed.insert(t.modality, m.observed_count() == grid.len());
            }
            if t.kind == TermKind::Advection && !advection.contains_key(&t.modality) {
                let dydt = temporal_difference(m.values())?;
                let (gx, gy) = spatial_gradient(m.values())?;
                advection.insert(
                    t.modality,
                    [tape.constant(dydt.to_tensor()), tape.constant(gx.to_tensor()), tape.constant(gy.to_tensor())],
                );
            }
        }
        Ok(ObsConstants { grid, nodes, all_observed, advection })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    fn get(&self, m: usize) -> Result<(NodeId, NodeId)> {
        self.nodes.get(&m).copied().ok_or(Error::MissingModality(m))
    }
}

/// `x̄ + δx` for a packed `[1, 2T, H, W]` state node.
pub fn composite_node(tape: &mut Tape, x: NodeId) -> Result<NodeId> {
    let c = tape.shape(x).c();
    if c % 2 != 0 {
        return Err(Error::Shape(format!("packed state needs an even channel count, got {c}")));
    }
    let xbar = tape.slice_channels(x, 0, c / 2)?;
    let dx = tape.slice_channels(x, c / 2, c / 2)?;
    tape.add(xbar, dx)
}

/// Per-frame convolution of a `[1, T, H, W]` field with `k: [F, 1, k, k]`,
/// giving `[T, F, H, W]`.
fn framewise_conv(tape: &mut Tape, f: NodeId, k: NodeId) -> Result<NodeId> {
    let s = tape.shape(f);
    let frames = tape.reshape(f, Shape::new(s.c(), 1, s.h(), s.w()))?;
    tape.conv2d(frames, k)
}

fn check_kernel(tape: &Tape, k: NodeId, spec: &ObsTermSpec, name: &str) -> Result<()> {
    let want = Shape::new(spec.channels, 1, spec.kernel, spec.kernel);
    if tape.shape(k) != want {
        return Err(Error::Shape(format!("kernel {name} has shape {:?}, expected {:?}", tape.shape(k).0, want.0)));
    }
    Ok(())
}

/// Residual node `G_{m,n}(y_m, x)` for one term.
pub fn residual_node(
    tape: &mut Tape,
    spec: &ObsTermSpec,
    consts: &ObsConstants,
    x: NodeId,
    params: &BoundParams,
) -> Result<(NodeId, NodeId)> {
    let (y, mask) = consts.get(spec.modality)?;
    let n_t = consts.grid.n_t;
    match spec.kind {
        TermKind::MaskedIdentity => {
            let eta = composite_node(tape, x)?;
            let r = tape.sub(y, eta)?;
            Ok((r, mask))
        }
        TermKind::LargeScale => {
            let xbar = tape.slice_channels(x, 0, n_t)?;
            let r = tape.sub(y, xbar)?;
            Ok((r, mask))
        }
        TermKind::FeaturePair => {
            let (n1, n2) = spec.kernel_names();
            let (k1, k2) = (params.get(&n1)?, params.get(&n2)?);
            check_kernel(tape, k1, spec, &n1)?;
            check_kernel(tape, k2, spec, &n2)?;
            let eta = composite_node(tape, x)?;
            let fy = framewise_conv(tape, y, k1)?;
            let fx = framewise_conv(tape, eta, k2)?;
            let r = tape.sub(fy, fx)?;
            let rs = tape.shape(r);
            let fmask = if consts.all_observed[&spec.modality] {
                tape.constant(Tensor::full(rs, 1.0))
            } else {
                // repeat the frame mask across the feature channels
                let m = tape.value(mask).data();
                let plane = rs.plane();
                let t = Tensor::from_fn(rs, |i| {
                    let frame = i / (rs.c() * plane);
                    m[frame * plane + i % plane]
                });
                tape.constant(t)
            };
            Ok((r, fmask))
        }
        TermKind::Advection => {
            let [dydt, gx, gy] = *consts
                .advection
                .get(&spec.modality)
                .ok_or_else(|| Error::Config(format!("advection constants missing for modality {}", spec.modality)))?;
            let eta = composite_node(tape, x)?;
            let (u, v) = velocity_nodes(tape, eta, consts.grid.dx, spec.velocity_scale);
            let a = tape.hadamard(gx, u)?;
            let b = tape.hadamard(gy, v)?;
            let transport = tape.add(a, b)?;
            let r = tape.sub(dydt, transport)?;
            Ok((r, mask))
        }
    }
}

/// `u = −c ∂η/∂y`, `v = c ∂η/∂x`.
fn velocity_nodes(tape: &mut Tape, eta: NodeId, dx: f64, c: f64) -> (NodeId, NodeId) {
    let dy = tape.diff_y(eta, dx);
    let dxn = tape.diff_x(eta, dx);
    (tape.scale(dy, -c), tape.scale(dxn, c))
}

/// Unweighted `‖G_{m,n}‖²` node.
pub fn term_norm_node(
    tape: &mut Tape,
    spec: &ObsTermSpec,
    consts: &ObsConstants,
    x: NodeId,
    params: &BoundParams,
) -> Result<NodeId> {
    let (r, mask) = residual_node(tape, spec, consts, x, params)?;
    tape.masked_sq_norm(r, mask)
}

fn check_grids(y: &ObsModality, s: &StateSeq) -> Result<()> {
    ensure_same_grid(y.grid(), s.grid())?;
    ensure_same_grid(s.xbar.grid(), s.dx.grid())
}

/// `1_Ω · (y₁ − x̄ − δx)`.
pub fn masked_identity_residual(y1: &ObsModality, s: &StateSeq) -> Result<FieldStack> {
    check_grids(y1, s)?;
    let eta = composite(s)?;
    let r = y1.values().zip_with(&eta, |y, e| y - e)?;
    r.zip_with(y1.mask(), |v, m| if m == 0.0 { 0.0 } else { v })
}

/// `y₂ − x̄`, masked if `y₂` carries a mask.
pub fn largescale_residual(y2: &ObsModality, s: &StateSeq) -> Result<FieldStack> {
    check_grids(y2, s)?;
    let r = y2.values().zip_with(&s.xbar, |y, e| y - e)?;
    r.zip_with(y2.mask(), |v, m| if m == 0.0 { 0.0 } else { v })
}

/// `conv(y₃; K¹) − conv(x̄ + δx; K²)` per frame, one channel per feature:
/// a `[T, F, H, W]` tensor.
pub fn feature_pair_residual(y3: &ObsModality, s: &StateSeq, params: &ParamStore, spec: &ObsTermSpec) -> Result<Tensor> {
    check_grids(y3, s)?;
    let mut tape = Tape::new();
    let obs = ObsSet::new(alloc::vec![y3.clone()])?;
    let spec = ObsTermSpec { modality: y3.id, ..spec.clone() };
    let consts = ObsConstants::new(&mut tape, &obs, core::slice::from_ref(&spec))?;
    let bound = params.bind(&mut tape, false);
    let x = tape.constant(s.to_tensor());
    let (r, _) = residual_node(&mut tape, &spec, &consts, x, &bound)?;
    Ok(tape.value(r).clone())
}

/// Geostrophic-style velocity from the composite SSH: `u = −c ∂η/∂y`, `v = c ∂η/∂x`.
pub fn geostrophic_velocity(s: &StateSeq, c: f64) -> Result<(FieldStack, FieldStack)> {
    let eta = composite(s)?;
    let (gx, gy) = spatial_gradient(&eta)?;
    Ok((gy.map(|v| (-c * v as f64) as f32)?, gx.map(|v| (c * v as f64) as f32)?))
}

/// `∂y/∂t − ⟨∇y, V(x)⟩`.
pub fn advection_residual(y: &ObsModality, s: &StateSeq, c: f64) -> Result<FieldStack> {
    check_grids(y, s)?;
    let dydt = temporal_difference(y.values())?;
    let (gx, gy) = spatial_gradient(y.values())?;
    let (u, v) = geostrophic_velocity(s, c)?;
    let g = *y.grid();
    let data: Vec<f32> = (0..g.len())
        .map(|i| {
            let adv = gx.data()[i] as f64 * u.data()[i] as f64 + gy.data()[i] as f64 * v.data()[i] as f64;
            (dydt.data()[i] as f64 - adv) as f32
        })
        .collect();
    FieldStack::new(g, data)
}
