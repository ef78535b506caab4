//! Finite-difference gradient audit over every tape primitive and every
//! differentiable model component, on small seeded instances.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::fields::{FieldStack, GridSpec, ObsModality, ObsSet};
use crate::gradcore::{grad_check, BoundParams, NodeId, ParamStore, Shape, Tape, Tensor};
use crate::obsops::{init_obs_params, term_norm_node, ObsConstants, TermKind};
use crate::priornet::{phi_init, phi_residual_node};
use crate::solver::{lstm_cell_node, solver_init, unroll_node, SolverConfig, LMAP_PREFIX, LSTM_PREFIX};
use crate::varcost::{cost_node, CostConfig};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Tolerance for single operators and components.
pub const TOL: f64 = 1e-5;
/// Tolerance for the unrolled solve.
pub const TOL_UNROLL: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckRow {
    pub name: String,
    pub error: f64,
    pub tol: f64,
}

impl CheckRow {
    pub fn pass(&self) -> bool {
        self.error < self.tol
    }
}

fn rand_t(shape: Shape, seed: u64, scale: f64) -> Tensor {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| scale * r.random_range(-1.0..1.0))
}

fn rand_field(g: GridSpec, seed: u64) -> FieldStack {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    FieldStack::new(g, (0..g.len()).map(|_| r.random_range(-1.0..1.0f32)).collect()).expect("grid length")
}

/// Weights every output coordinate with a fixed random factor.
fn project(tape: &mut Tape, x: NodeId, seed: u64) -> Result<NodeId> {
    let w = tape.constant(rand_t(tape.shape(x), seed, 1.0));
    tape.dot(x, w)
}

fn row(name: &str, error: f64, tol: f64) -> CheckRow {
    CheckRow { name: name.to_string(), error, tol }
}

type Op = fn(&mut Tape, &[NodeId]) -> Result<NodeId>;

/// Every registered primitive, each reduced to a scalar by a random projection.
pub fn primitive_checks() -> Result<Vec<CheckRow>> {
    let s = Shape::new(2, 2, 4, 4);
    let a = rand_t(s, 10, 1.0);
    let b = rand_t(s, 11, 1.0);
    let w = rand_t(Shape::new(3, 2, 3, 3), 12, 1.0);
    let w2 = rand_t(Shape::new(3, 2, 3, 3), 14, 1.0);
    let bias = rand_t(Shape::new(1, 2, 1, 1), 13, 1.0);
    let pos = Tensor::from_fn(s, |i| 0.5 + (i % 7) as f64 * 0.1);
    let cases: Vec<(&str, Op, Vec<Tensor>)> = vec![
        ("add", |t, x| { let y = t.add(x[0], x[1])?; project(t, y, 1) }, vec![a.clone(), b.clone()]),
        ("sub", |t, x| { let y = t.sub(x[0], x[1])?; project(t, y, 1) }, vec![a.clone(), b.clone()]),
        ("scale", |t, x| { let y = t.scale(x[0], -2.5); project(t, y, 1) }, vec![a.clone()]),
        ("hadamard", |t, x| { let y = t.hadamard(x[0], x[1])?; project(t, y, 1) }, vec![a.clone(), b.clone()]),
        ("conv2d", |t, x| { let y = t.conv2d(x[0], x[1])?; project(t, y, 2) }, vec![a.clone(), w.clone()]),
        ("add_bias", |t, x| { let y = t.add_bias(x[0], x[1])?; project(t, y, 3) }, vec![a.clone(), bias]),
        ("tanh", |t, x| { let y = t.tanh(x[0]); project(t, y, 4) }, vec![a.clone()]),
        ("sigmoid", |t, x| { let y = t.sigmoid(x[0]); project(t, y, 4) }, vec![a.clone()]),
        ("powf", |t, x| { let y = t.powf(x[0], -0.5); project(t, y, 4) }, vec![pos]),
        ("bilinear", |t, x| { let y = t.bilinear(x[0], x[1], x[2])?; project(t, y, 5) }, vec![a.clone(), w, w2]),
        ("avgpool2", |t, x| { let y = t.avgpool2(x[0])?; project(t, y, 6) }, vec![a.clone()]),
        ("upsample_bilinear2", |t, x| { let y = t.upsample_bilinear2(x[0]); project(t, y, 7) }, vec![a.clone()]),
        ("upsample_nearest2", |t, x| { let y = t.upsample_nearest2(x[0]); project(t, y, 7) }, vec![a.clone()]),
        ("concat_channels", |t, x| { let y = t.concat_channels(x[0], x[1])?; project(t, y, 8) }, vec![a.clone(), b.clone()]),
        ("slice_channels", |t, x| { let y = t.slice_channels(x[0], 1, 1)?; project(t, y, 8) }, vec![a.clone()]),
        ("reshape", |t, x| { let y = t.reshape(x[0], Shape::new(4, 1, 4, 4))?; project(t, y, 8) }, vec![a.clone()]),
        ("diff_x", |t, x| { let y = t.diff_x(x[0], 0.3); project(t, y, 9) }, vec![a.clone()]),
        ("diff_y", |t, x| { let y = t.diff_y(x[0], 0.3); project(t, y, 9) }, vec![a.clone()]),
        ("scale_by", |t, x| { let s = t.dot(x[1], x[1])?; let y = t.scale_by(x[0], s)?; project(t, y, 9) }, vec![a.clone(), b]),
        ("sum_fill", |t, x| { let s = t.sum(x[0]); let y = t.fill(s, Shape::new(1, 1, 2, 2))?; Ok(t.sq_norm(y)) }, vec![a.clone()]),
        ("channel_sum", |t, x| { let y = t.channel_sum(x[0]); Ok(t.sq_norm(y)) }, vec![a.clone()]),
        ("masked_sq_norm", |t, x| {
            let m = t.constant(Tensor::from_fn(t.shape(x[0]), |i| (i % 3 != 0) as u8 as f64));
            t.masked_sq_norm(x[0], m)
        }, vec![a]),
    ];
    cases.into_iter().map(|(name, f, inputs)| Ok(row(name, grad_check(f, &inputs, FD_STEP)?, TOL))).collect()
}

/// Every slice of `p` replaced by O(1) random values so that no gradient
/// coordinate is negligible next to the others.
fn randomize(mut p: ParamStore, seed: u64, scale: f64) -> ParamStore {
    for (k, (_, t)) in p.iter_mut().enumerate() {
        *t = rand_t(t.shape(), seed.wrapping_add(k as u64), scale);
    }
    p
}

fn flatten(p: &ParamStore) -> (Vec<String>, Vec<Tensor>) {
    p.iter().map(|(n, t)| (n.clone(), t.clone())).unzip()
}

fn bind(names: &[String], ids: &[NodeId]) -> BoundParams {
    names.iter().cloned().zip(ids.iter().copied()).collect()
}

/// Masked SSH, gap-free large-scale SSH and dense SST on `g`.
fn check_obs(g: GridSpec, seed: u64) -> Result<ObsSet> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mask = FieldStack::new(g, (0..g.len()).map(|_| if r.random_bool(0.4) { 1.0 } else { 0.0 }).collect())?;
    let y1 = rand_field(g, seed + 1).zip_with(&mask, |v, m| v * m)?;
    ObsSet::new(vec![
        ObsModality::new(1, y1, mask)?,
        ObsModality::full(2, rand_field(g, seed + 2)),
        ObsModality::full(3, rand_field(g, seed + 3)),
    ])
}

/// Observation terms, prior, full cost, LSTM cell and a K=3 unrolled solve
/// for the term layout of `cost` and the cell of `solver`. Network widths are
/// capped at `max_width` channels to keep the coordinate-wise check tractable.
pub fn model_checks(cost: &CostConfig, solver: &SolverConfig, max_width: usize) -> Result<Vec<CheckRow>> {
    let g = GridSpec::new(2, 6, 6, 0.25, 1.0)?;
    let obs = check_obs(g, 1)?;
    let mut cost = cost.clone();
    cost.prior.base_channels = cost.prior.base_channels.min(max_width);
    // weights enter linearly; O(1) values keep the finite-difference
    // roundoff of a heavily weighted term from swamping small coordinates
    cost.gamma = 0.7;
    for (i, t) in cost.terms.iter_mut().enumerate() {
        t.weight = 0.5 + 0.25 * i as f64;
        t.channels = t.channels.min(max_width);
        t.modality = match t.kind {
            TermKind::MaskedIdentity => 1,
            TermKind::LargeScale => 2,
            TermKind::FeaturePair | TermKind::Advection => 3,
        };
    }
    let x = rand_t(Shape::new(1, 2 * g.n_t, g.n_y, g.n_x), 2, 1.0);
    let obs_p = randomize(init_obs_params(&cost.terms, 3), 300, 0.5);
    let phi_p = randomize(phi_init(&cost.prior, g.n_t, 4)?, 400, 0.4);
    let mut out = Vec::new();

    for spec in &cost.terms {
        let (names, tensors) = flatten(&obs_p);
        let inputs: Vec<Tensor> = [x.clone()].into_iter().chain(tensors).collect();
        let err = grad_check(
            |tape, ids| {
                let consts = ObsConstants::new(tape, &obs, core::slice::from_ref(spec))?;
                term_norm_node(tape, spec, &consts, ids[0], &bind(&names, &ids[1..]))
            },
            &inputs,
            FD_STEP,
        )?;
        out.push(row(&format!("term {} ({:?})", spec.id(), spec.kind), err, TOL));
    }

    let (names, tensors) = flatten(&phi_p);
    let inputs: Vec<Tensor> = [x.clone()].into_iter().chain(tensors).collect();
    let err = grad_check(|tape, ids| phi_residual_node(tape, &bind(&names, &ids[1..]), ids[0]), &inputs, FD_STEP)?;
    out.push(row("prior", err, TOL));

    let mut all = obs_p.clone();
    all.extend(phi_p.clone());
    let (names, tensors) = flatten(&all);
    let inputs: Vec<Tensor> = [x.clone()].into_iter().chain(tensors).collect();
    let err = grad_check(
        |tape, ids| {
            let consts = ObsConstants::new(tape, &obs, &cost.terms)?;
            Ok(cost_node(tape, &cost, &consts, &bind(&names, &ids[1..]), ids[0])?.total)
        },
        &inputs,
        FD_STEP,
    )?;
    out.push(row("cost", err, TOL));

    let hidden = solver.hidden_channels.clamp(1, max_width);
    let solver = SolverConfig { hidden_channels: hidden, n_iters: 3, ..solver.clone() };
    let s = Shape::new(1, hidden, 6, 6);
    let cell_in = vec![
        rand_t(Shape::new(1, 2 * g.n_t, 6, 6), 20, 1.0),
        rand_t(s, 21, 1.0),
        rand_t(s, 22, 1.0),
        rand_t(Shape::new(4 * hidden, 2 * g.n_t + hidden, solver.kernel, solver.kernel), 23, 0.4),
        rand_t(Shape::new(1, 4 * hidden, 1, 1), 24, 0.4),
    ];
    let err = grad_check(
        |tape, ids| {
            let bound: BoundParams = [(format!("{LSTM_PREFIX}.w"), ids[3]), (format!("{LSTM_PREFIX}.b"), ids[4])].into_iter().collect();
            let (h, c) = lstm_cell_node(tape, &bound, ids[0], ids[1], ids[2])?;
            let a = project(tape, h, 25)?;
            let b = project(tape, c, 26)?;
            tape.add(a, b)
        },
        &cell_in,
        FD_STEP,
    )?;
    out.push(row("lstm cell", err, TOL));

    let mut p = all;
    p.extend(solver_init(&solver, g.n_t, 5)?);
    let l = format!("{LMAP_PREFIX}.w");
    let shape = p.get(&l)?.shape();
    p.insert(l, rand_t(shape, 6, 0.2));
    let (names, tensors) = flatten(&p);
    let inputs: Vec<Tensor> = [x].into_iter().chain(tensors).collect();
    let err = grad_check(
        |tape, ids| {
            let consts = ObsConstants::new(tape, &obs, &cost.terms)?;
            let (xk, _) = unroll_node(tape, &cost, &solver, &consts, &bind(&names, &ids[1..]), ids[0])?;
            project(tape, xk, 77)
        },
        &inputs,
        FD_STEP,
    )?;
    out.push(row("unrolled solve (K=3)", err, TOL_UNROLL));
    Ok(out)
}
