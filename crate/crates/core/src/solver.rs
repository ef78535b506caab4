//! Iterative minimisation of the variational cost: plain gradient descent and
//! the trainable convolutional LSTM update `x ← x − L(LSTM(∇ₓU, h, c))`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{ObsSet, StateSeq};
use crate::gradcore::{normal_tensor, BoundParams, NodeId, ParamStore, Shape, Tape, Tensor};
use crate::obsops::ObsConstants;
use crate::varcost::{cost_node, CostConfig, CostNodes};

pub const LSTM_PREFIX: &str = "lstm";
pub const LMAP_PREFIX: &str = "lmap";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SolverMode {
    Gd { step: f64 },
    Lstm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradNorm {
    None,
    PerFieldRms,
}

fn default_hidden() -> usize {
    16
}
fn default_kernel() -> usize {
    3
}
fn default_norm() -> GradNorm {
    GradNorm::PerFieldRms
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub mode: SolverMode,
    pub n_iters: usize,
    #[serde(default = "default_hidden")]
    pub hidden_channels: usize,
    #[serde(default = "default_norm")]
    pub grad_normalization: GradNorm,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
}

impl SolverConfig {
    pub fn lstm(n_iters: usize) -> Self {
        SolverConfig {
            mode: SolverMode::Lstm,
            n_iters,
            hidden_channels: default_hidden(),
            grad_normalization: default_norm(),
            kernel: default_kernel(),
        }
    }

    pub fn gd(step: f64, n_iters: usize) -> Self {
        SolverConfig { mode: SolverMode::Gd { step }, ..Self::lstm(n_iters) }
    }

    pub fn validate(&self) -> Result<()> {
        if let SolverMode::Gd { step } = self.mode {
            if !(step > 0.0 && step.is_finite()) {
                return Err(Error::Config(format!("gradient-descent step must be positive, got {step}")));
            }
        }
        if self.hidden_channels == 0 || self.kernel % 2 == 0 {
            return Err(Error::Config("solver needs hidden_channels >= 1 and an odd kernel".into()));
        }
        Ok(())
    }
}

/// Iterate, LSTM hidden state and LSTM cell, all `[1, C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SolverState {
    pub x: StateSeq,
    pub h: Tensor,
    pub c: Tensor,
}

impl SolverState {
    pub fn new(x: StateSeq, hidden: usize) -> Self {
        let g = *x.grid();
        let s = Shape::new(1, hidden, g.n_y, g.n_x);
        SolverState { x, h: Tensor::zeros(s), c: Tensor::zeros(s) }
    }
}

/// LSTM gate weights `[4C_h, 2T + C_h, k, k]` with biases, and the zero
/// 1×1 map `L: C_h → 2T`.
pub fn solver_init(cfg: &SolverConfig, n_t: usize, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ch = cfg.hidden_channels;
    let cin = 2 * n_t + ch;
    let k = cfg.kernel;
    let std = 1.0 / libm::sqrt((cin * k * k) as f64);
    let mut p = ParamStore::new();
    p.insert(format!("{LSTM_PREFIX}.w"), normal_tensor(&mut rng, Shape::new(4 * ch, cin, k, k), std));
    p.insert(format!("{LSTM_PREFIX}.b"), Tensor::zeros(Shape::new(1, 4 * ch, 1, 1)));
    p.insert(format!("{LMAP_PREFIX}.w"), Tensor::zeros(Shape::new(2 * n_t, ch, 1, 1)));
    Ok(p)
}

/// `x − α g`.
pub fn gd_step(x: &StateSeq, g: &StateSeq, alpha: f64) -> Result<StateSeq> {
    let xbar = x.xbar.zip_with(&g.xbar, |a, b| (a as f64 - alpha * b as f64) as f32)?;
    let dx = x.dx.zip_with(&g.dx, |a, b| (a as f64 - alpha * b as f64) as f32)?;
    StateSeq::new(xbar, dx)
}

/// One convolutional LSTM cell step on tape nodes; returns `(h′, c′)`.
pub fn lstm_cell_node(tape: &mut Tape, params: &BoundParams, g: NodeId, h: NodeId, c: NodeId) -> Result<(NodeId, NodeId)> {
    let ch = tape.shape(h).c();
    if tape.shape(c) != tape.shape(h) {
        return Err(Error::Shape(format!("hidden {:?} and cell {:?} differ", tape.shape(h).0, tape.shape(c).0)));
    }
    let inp = tape.concat_channels(g, h)?;
    let w = params.get(&format!("{LSTM_PREFIX}.w"))?;
    let b = params.get(&format!("{LSTM_PREFIX}.b"))?;
    if tape.shape(w).n() != 4 * ch {
        return Err(Error::Shape(format!("gate weights {:?} for {ch} hidden channels", tape.shape(w).0)));
    }
    let z = tape.conv2d(inp, w)?;
    let z = tape.add_bias(z, b)?;
    let zi = tape.slice_channels(z, 0, ch)?;
    let zf = tape.slice_channels(z, ch, ch)?;
    let zo = tape.slice_channels(z, 2 * ch, ch)?;
    let zc = tape.slice_channels(z, 3 * ch, ch)?;
    let i = tape.sigmoid(zi);
    let f = tape.sigmoid(zf);
    let o = tape.sigmoid(zo);
    let cand = tape.tanh(zc);
    let fc = tape.hadamard(f, c)?;
    let ic = tape.hadamard(i, cand)?;
    let c2 = tape.add(fc, ic)?;
    let tc = tape.tanh(c2);
    let h2 = tape.hadamard(o, tc)?;
    Ok((h2, c2))
}

/// `lstm_step` on plain tensors: `(g_out, h′, c′)` with `g_out = h′`.
pub fn lstm_step(g: &Tensor, h: &Tensor, c: &Tensor, params: &ParamStore) -> Result<(Tensor, Tensor, Tensor)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let (gn, hn, cn) = (tape.constant(g.clone()), tape.constant(h.clone()), tape.constant(c.clone()));
    let (h2, c2) = lstm_cell_node(&mut tape, &bound, gn, hn, cn)?;
    let h2 = tape.value(h2).clone();
    Ok((h2.clone(), h2, tape.value(c2).clone()))
}

/// Scales the `x̄` and `δx` halves of a packed gradient by their own RMS.
fn normalize_node(tape: &mut Tape, g: NodeId) -> Result<NodeId> {
    let c = tape.shape(g).c() / 2;
    let mut parts = [g; 2];
    for (k, part) in parts.iter_mut().enumerate() {
        let p = tape.slice_channels(g, k * c, c)?;
        let n = tape.shape(p).numel() as f64;
        let ss = tape.sq_norm(p);
        let ms = tape.affine(ss, 1.0 / n, 1e-12);
        let inv = tape.powf(ms, -0.5);
        *part = tape.scale_by(p, inv)?;
    }
    tape.concat_channels(parts[0], parts[1])
}

/// Nodes carried from one iteration to the next.
#[derive(Clone, Copy, Debug)]
pub struct IterNodes {
    pub x: NodeId,
    pub h: NodeId,
    pub c: NodeId,
}

/// Records one solver iteration from `it`; returns the next iterate and the
/// cost nodes at `it.x`.
pub fn step_node(
    tape: &mut Tape,
    cost: &CostConfig,
    solver: &SolverConfig,
    consts: &ObsConstants,
    params: &BoundParams,
    it: IterNodes,
) -> Result<(IterNodes, CostNodes)> {
    let nodes = cost_node(tape, cost, consts, params, it.x)?;
    let u = nodes.total;
    let g = tape.grad(u, &[it.x])?[0].ok_or_else(|| Error::Numerical("cost does not depend on the state".into()))?;
    let next = match solver.mode {
        SolverMode::Gd { step } => {
            let d = tape.scale(g, step);
            IterNodes { x: tape.sub(it.x, d)?, ..it }
        }
        SolverMode::Lstm => {
            let gin = match solver.grad_normalization {
                GradNorm::None => g,
                GradNorm::PerFieldRms => normalize_node(tape, g)?,
            };
            let (h, c) = lstm_cell_node(tape, params, gin, it.h, it.c)?;
            let l = params.get(&format!("{LMAP_PREFIX}.w"))?;
            let upd = tape.conv2d(h, l)?;
            IterNodes { x: tape.sub(it.x, upd)?, h, c }
        }
    };
    Ok((next, nodes))
}

fn check_finite(u: f64, iteration: usize) -> Result<()> {
    if u.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence { iteration })
    }
}

/// Records `K` unrolled iterations starting from `x0` (with zero LSTM state);
/// returns the final iterate and the `K + 1` cost values.
pub fn unroll_node(
    tape: &mut Tape,
    cost: &CostConfig,
    solver: &SolverConfig,
    consts: &ObsConstants,
    params: &BoundParams,
    x0: NodeId,
) -> Result<(NodeId, Vec<f64>)> {
    let s = tape.shape(x0);
    let hs = Shape::new(s.n(), solver.hidden_channels, s.h(), s.w());
    let h = tape.constant(Tensor::zeros(hs));
    let c = tape.constant(Tensor::zeros(hs));
    let mut it = IterNodes { x: x0, h, c };
    let mut trace = Vec::with_capacity(solver.n_iters + 1);
    for k in 0..solver.n_iters {
        let (next, nodes) = step_node(tape, cost, solver, consts, params, it)?;
        let u = tape.value(nodes.total).item();
        check_finite(u, k)?;
        trace.push(u);
        it = next;
    }
    let u = cost_node(tape, cost, consts, params, it.x)?.total;
    let uv = tape.value(u).item();
    check_finite(uv, solver.n_iters)?;
    trace.push(uv);
    Ok((it.x, trace))
}

/// One row of the iterate trace: iteration, total cost and weighted terms.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub cost: f64,
    pub terms: Vec<(String, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolveOutput {
    pub x: StateSeq,
    pub trace: Vec<TraceRow>,
}

impl SolveOutput {
    pub fn costs(&self) -> Vec<f64> {
        self.trace.iter().map(|r| r.cost).collect()
    }
}

/// Inference-mode solve: each iteration is recorded on a fresh tape.
pub fn solve(
    x0: &StateSeq,
    obs: &ObsSet,
    params: &ParamStore,
    cost: &CostConfig,
    solver: &SolverConfig,
) -> Result<SolveOutput> {
    cost.validate()?;
    solver.validate()?;
    let grid = *x0.grid();
    let mut state = SolverState::new(x0.clone(), solver.hidden_channels);
    let mut trace = Vec::with_capacity(solver.n_iters + 1);
    for k in 0..=solver.n_iters {
        let mut tape = Tape::new();
        let consts = ObsConstants::new(&mut tape, obs, &cost.terms)?;
        let bound = params.bind(&mut tape, false);
        let x = tape.var(state.x.to_tensor());
        if k == solver.n_iters {
            let nodes = cost_node(&mut tape, cost, &consts, &bound, x)?;
            trace.push(row(&tape, k, &nodes)?);
            break;
        }
        let h = tape.constant(core::mem::replace(&mut state.h, Tensor::scalar(0.0)));
        let c = tape.constant(core::mem::replace(&mut state.c, Tensor::scalar(0.0)));
        let (next, nodes) = step_node(&mut tape, cost, solver, &consts, &bound, IterNodes { x, h, c })?;
        trace.push(row(&tape, k, &nodes)?);
        // the iterate is stored in 32 bits between iterations
        if tape.value(next.x).data().iter().any(|&v| !(v as f32).is_finite()) {
            return Err(Error::Divergence { iteration: k + 1 });
        }
        state.x = StateSeq::from_tensor(grid, tape.value(next.x))?;
        state.h = tape.value(next.h).clone();
        state.c = tape.value(next.c).clone();
    }
    Ok(SolveOutput { x: state.x, trace })
}

fn row(tape: &Tape, iteration: usize, nodes: &CostNodes) -> Result<TraceRow> {
    let cost = tape.value(nodes.total).item();
    check_finite(cost, iteration)?;
    let terms = nodes.terms.iter().map(|(id, n)| (id.clone(), tape.value(*n).item())).collect();
    Ok(TraceRow { iteration, cost, terms })
}
