//! Supervised end-to-end training: reconstruction, gradient and prior losses,
//! Adam with a step-decayed learning rate and an increasing unroll depth.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{composite, FieldStack, ObsSet, StateSeq};
use crate::gradcore::{BoundParams, NodeId, ParamStore, Shape, Tape, Tensor};
use crate::metrics::mu_sigma;
use crate::obsops::{composite_node, init_obs_params, ObsConstants};
use crate::osse::TrainSample;
use crate::priornet::{phi_init, phi_node, unet_init, unet_node, PhiConfig};
use crate::solver::{solve, solver_init, unroll_node, SolverConfig};
use crate::varcost::CostConfig;

pub const DIRECT_PREFIX: &str = "direct";

/// `x̄ ← y₂` (gap-free large-scale modality) when present, zeros otherwise; `δx ← 0`.
pub fn init_state(obs: &ObsSet) -> Result<StateSeq> {
    let grid = *obs.grid().ok_or_else(|| Error::Config("empty observation set".into()))?;
    match obs.get(2) {
        Some(y2) => Ok(StateSeq::new(y2.values().clone(), FieldStack::zeros(grid))?),
        None => {
            if obs.get(1).is_some() {
                log::warn!("no gap-free large-scale modality; starting from a zero state");
            }
            Ok(StateSeq::zeros(grid))
        }
    }
}

/// What is trained: the unrolled variational solver, or a one-pass U-Net
/// on stacked observation channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    Variational { cost: CostConfig, solver: SolverConfig },
    Direct { net: PhiConfig, use_sst: bool },
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            ModelSpec::Variational { cost, solver } => {
                cost.validate()?;
                solver.validate()
            }
            ModelSpec::Direct { net, .. } => net.validate(),
        }
    }

    fn direct_inputs(use_sst: bool) -> usize {
        if use_sst {
            4
        } else {
            3
        }
    }
}

pub fn model_init(model: &ModelSpec, n_t: usize, seed: u64) -> Result<ParamStore> {
    model.validate()?;
    match model {
        ModelSpec::Variational { cost, solver } => {
            let mut p = phi_init(&cost.prior, n_t, seed)?;
            p.extend(init_obs_params(&cost.terms, seed.wrapping_add(1)));
            p.extend(solver_init(solver, n_t, seed.wrapping_add(2))?);
            Ok(p)
        }
        ModelSpec::Direct { net, use_sst } => {
            unet_init(DIRECT_PREFIX, ModelSpec::direct_inputs(*use_sst) * n_t, n_t, net, seed)
        }
    }
}

/// Stacked direct-inversion input `[masked y₁, mask, y₂, (y₃)]`.
pub fn direct_input(obs: &ObsSet, use_sst: bool) -> Result<Tensor> {
    let y1 = obs.require(1)?;
    let mut parts = vec![y1.values(), y1.mask(), obs.require(2)?.values()];
    if use_sst {
        parts.push(obs.require(3)?.values());
    }
    let g = *y1.grid();
    let data: Vec<f64> = parts.iter().flat_map(|f| f.data().iter().map(|&v| v as f64)).collect();
    Tensor::from_vec(Shape::new(1, parts.len() * g.n_t, g.n_y, g.n_x), data)
}

/// Model output on a tape: the composite field and, for the variational
/// model, the packed two-component state.
pub struct ForwardNodes {
    pub composite: NodeId,
    pub state: Option<NodeId>,
    pub trace: Vec<f64>,
}

/// Records a differentiable forward pass; `n_iters` overrides the solver depth.
pub fn forward_node(
    tape: &mut Tape,
    model: &ModelSpec,
    params: &BoundParams,
    sample: &TrainSample,
    n_iters: usize,
) -> Result<ForwardNodes> {
    match model {
        ModelSpec::Variational { cost, solver } => {
            let consts = ObsConstants::new(tape, &sample.obs, &cost.terms)?;
            let x0 = tape.constant(sample.x0.to_tensor());
            let cfg = SolverConfig { n_iters, ..solver.clone() };
            let (x, trace) = unroll_node(tape, cost, &cfg, &consts, params, x0)?;
            let c = composite_node(tape, x)?;
            Ok(ForwardNodes { composite: c, state: Some(x), trace })
        }
        ModelSpec::Direct { use_sst, .. } => {
            let inp = tape.constant(direct_input(&sample.obs, *use_sst)?);
            let out = unet_node(tape, params, DIRECT_PREFIX, inp)?;
            Ok(ForwardNodes { composite: out, state: None, trace: Vec::new() })
        }
    }
}

/// Inference-mode reconstruction of the composite field.
pub fn reconstruct(model: &ModelSpec, params: &ParamStore, sample: &TrainSample) -> Result<(FieldStack, Vec<f64>)> {
    match model {
        ModelSpec::Variational { cost, solver } => {
            let out = solve(&sample.x0, &sample.obs, params, cost, solver)?;
            Ok((composite(&out.x)?, out.costs()))
        }
        ModelSpec::Direct { .. } => {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, false);
            let f = forward_node(&mut tape, model, &bound, sample, 0)?;
            Ok((FieldStack::from_tensor(*sample.truth.grid(), tape.value(f.composite))?, Vec::new()))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub w_x: f64,
    pub w_grad: f64,
    pub w_phi: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { w_x: 1.0, w_grad: 10.0, w_phi: 0.1 }
    }
}

/// Two-component truth used by the prior loss: `x̄ = x₀.x̄`, `δx = truth − x̄`.
pub fn truth_state(sample: &TrainSample) -> Result<StateSeq> {
    let dx = sample.truth.zip_with(&sample.x0.xbar, |t, b| t - b)?;
    StateSeq::new(sample.x0.xbar.clone(), dx)
}

/// Weighted loss on tape nodes. The prior term is skipped when `w_phi = 0`
/// or no state is available.
pub fn loss_node(
    tape: &mut Tape,
    w: &LossWeights,
    params: &BoundParams,
    est: NodeId,
    truth: NodeId,
    est_state: Option<NodeId>,
    truth_state: Option<NodeId>,
    dx: f64,
) -> Result<NodeId> {
    let r = tape.sub(est, truth)?;
    let lx = tape.sq_norm(r);
    let mut total = tape.scale(lx, w.w_x);
    if w.w_grad > 0.0 {
        let gx = tape.diff_x(r, dx);
        let gy = tape.diff_y(r, dx);
        let a = tape.sq_norm(gx);
        let b = tape.sq_norm(gy);
        let s = tape.add(a, b)?;
        let s = tape.scale(s, w.w_grad);
        total = tape.add(total, s)?;
    }
    if w.w_phi > 0.0 {
        if let (Some(xs), Some(ts)) = (est_state, truth_state) {
            let mut parts = Vec::with_capacity(2);
            for s in [ts, xs] {
                let phi = phi_node(tape, params, s)?;
                let d = tape.sub(s, phi)?;
                parts.push(tape.sq_norm(d));
            }
            let s = tape.add(parts[0], parts[1])?;
            let s = tape.scale(s, w.w_phi);
            total = tape.add(total, s)?;
        }
    }
    Ok(total)
}

/// `w_x‖x − x̂‖² + w_grad‖∇x − ∇x̂‖² + w_phi(‖x − Φ(x)‖² + ‖x̂ − Φ(x̂)‖²)`;
/// the first two terms act on composites.
pub fn loss_total(est: &StateSeq, truth: &StateSeq, params: &ParamStore, w: &LossWeights) -> Result<f64> {
    crate::fields::ensure_same_grid(est.grid(), truth.grid())?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let xs = tape.constant(est.to_tensor());
    let ts = tape.constant(truth.to_tensor());
    let e = composite_node(&mut tape, xs)?;
    let t = composite_node(&mut tape, ts)?;
    let l = loss_node(&mut tape, w, &bound, e, t, Some(xs), Some(ts), est.grid().dx)?;
    Ok(tape.value(l).item())
}

/// Adam moments and step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: ParamStore,
    pub v: ParamStore,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        AdamState { m: params.zeros_like(), v: params.zeros_like(), t: 0 }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Bias-corrected Adam update of every slice that has a gradient.
pub fn adam_step(params: &mut ParamStore, grads: &ParamStore, state: &mut AdamState, lr: f64) -> Result<()> {
    adam_step_with(params, grads, state, lr, ADAM_BETA1, ADAM_BETA2, ADAM_EPS)
}

pub fn adam_step_with(
    params: &mut ParamStore,
    grads: &ParamStore,
    state: &mut AdamState,
    lr: f64,
    b1: f64,
    b2: f64,
    eps: f64,
) -> Result<()> {
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - libm::pow(b1, t as f64);
    let c2 = 1.0 - libm::pow(b2, t as f64);
    for (name, p) in params.iter_mut() {
        let Ok(g) = grads.get(name) else { continue };
        if g.shape() != p.shape() {
            return Err(Error::Shape(format!("gradient for {name} has shape {:?}", g.shape().0)));
        }
        let m = state.m.get_mut(name).ok_or_else(|| Error::MissingParam(name.clone()))?;
        let v = state.v.get_mut(name).ok_or_else(|| Error::MissingParam(name.clone()))?;
        for (((pv, gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            *mv = b1 * *mv + (1.0 - b1) * gv;
            *vv = b2 * *vv + (1.0 - b2) * gv * gv;
            let mh = *mv / c1;
            let vh = *vv / c2;
            *pv -= lr * mh / (libm::sqrt(vh) + eps);
        }
    }
    Ok(())
}

fn default_batch() -> usize {
    4
}
fn default_one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub weights: LossWeights,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_period: usize,
    /// `(first epoch, K)` pairs; the last entry whose epoch has been reached applies.
    pub unroll: Vec<(usize, usize)>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    /// Random square crop size for training samples; full windows when absent.
    #[serde(default)]
    pub patch: Option<usize>,
    /// Global gradient-norm clip.
    #[serde(default)]
    pub clip_norm: Option<f64>,
    /// Validation runs every `val_every` epochs and after the last one.
    #[serde(default = "default_one")]
    pub val_every: usize,
    #[serde(default)]
    pub checkpoint: Option<String>,
}

impl TrainConfig {
    pub fn desk(seed: u64) -> Self {
        TrainConfig {
            weights: LossWeights::default(),
            lr: 1e-3,
            lr_decay: 0.5,
            lr_period: 25,
            unroll: vec![(0, 5), (25, 10), (50, 15)],
            batch_size: default_batch(),
            epochs: 75,
            seed,
            patch: None,
            clip_norm: None,
            val_every: 1,
            checkpoint: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = &self.weights;
        if [w.w_x, w.w_grad, w.w_phi].iter().any(|v| !(*v >= 0.0 && v.is_finite())) || w.w_x + w.w_grad + w.w_phi == 0.0 {
            return Err(Error::Config("loss weights must be >= 0 with at least one positive".into()));
        }
        if !(self.lr > 0.0 && self.lr_decay > 0.0 && self.lr_period > 0) {
            return Err(Error::Config("learning-rate schedule needs lr > 0, decay > 0, period > 0".into()));
        }
        if self.unroll.first().map(|e| e.0) != Some(0) {
            return Err(Error::Config("unroll schedule must start at epoch 0".into()));
        }
        for w in self.unroll.windows(2) {
            if w[1].0 <= w[0].0 || w[1].1 < w[0].1 {
                return Err(Error::Config("unroll schedule must have increasing epochs and non-decreasing K".into()));
            }
        }
        if self.batch_size == 0 || self.val_every == 0 {
            return Err(Error::Config("batch_size and val_every must be positive".into()));
        }
        if self.patch == Some(0) || self.patch.is_some_and(|p| p % 2 != 0) {
            return Err(Error::Config("patch size must be even and positive".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * libm::pow(self.lr_decay, (epoch / self.lr_period) as f64)
    }

    pub fn unroll_at(&self, epoch: usize) -> usize {
        self.unroll.iter().take_while(|e| e.0 <= epoch).last().map_or(0, |e| e.1)
    }
}

/// Runs independent jobs; results come back in input order.
pub trait Executor: Sync {
    fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send;
}

pub struct Sequential;

impl Executor for Sequential {
    fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        items.iter().map(f).collect()
    }
}

/// Loss and parameter gradient for one sample.
pub fn sample_loss_grad(
    model: &ModelSpec,
    params: &ParamStore,
    sample: &TrainSample,
    w: &LossWeights,
    n_iters: usize,
) -> Result<(f64, ParamStore)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let f = forward_node(&mut tape, model, &bound, sample, n_iters)?;
    let truth = tape.constant(sample.truth.to_tensor());
    let ts = match f.state {
        Some(_) if w.w_phi > 0.0 => Some(tape.constant(truth_state(sample)?.to_tensor())),
        _ => None,
    };
    let l = loss_node(&mut tape, w, &bound, f.composite, truth, f.state, ts, sample.truth.grid().dx)?;
    let value = tape.value(l).item();
    if !value.is_finite() {
        return Err(Error::Numerical(format!("training loss is {value}")));
    }
    let g = tape.backward(l)?;
    Ok((value, bound.gradients(&g, &tape)))
}

/// Inference-mode loss and μ for one sample.
pub fn sample_eval(model: &ModelSpec, params: &ParamStore, sample: &TrainSample, w: &LossWeights) -> Result<(f64, f64)> {
    let (est, _) = reconstruct(model, params, sample)?;
    let g = *sample.truth.grid();
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let e = tape.constant(est.to_tensor());
    let t = tape.constant(sample.truth.to_tensor());
    let (es, ts) = match model {
        ModelSpec::Variational { .. } if w.w_phi > 0.0 => {
            let xbar = &sample.x0.xbar;
            let est_state = StateSeq::new(xbar.clone(), est.zip_with(xbar, |a, b| a - b)?)?;
            (Some(tape.constant(est_state.to_tensor())), Some(tape.constant(truth_state(sample)?.to_tensor())))
        }
        _ => (None, None),
    };
    let l = loss_node(&mut tape, w, &bound, e, t, es, ts, g.dx)?;
    let (mu, _, _) = mu_sigma(&est, &sample.truth)?;
    Ok((tape.value(l).item(), mu))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub n_iters: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_mu: Option<f64>,
}

/// Everything needed to resume or report a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ParamStore,
    pub adam: AdamState,
    /// Next epoch to run.
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    pub best_val: Option<f64>,
    pub best_params: ParamStore,
}

impl TrainState {
    pub fn new(params: ParamStore) -> Self {
        TrainState {
            adam: AdamState::new(&params),
            best_params: params.clone(),
            params,
            epoch: 0,
            history: Vec::new(),
            best_val: None,
        }
    }
}

fn mean_eval<E: Executor>(
    exec: &E,
    model: &ModelSpec,
    params: &ParamStore,
    samples: &[TrainSample],
    w: &LossWeights,
) -> Result<(f64, f64)> {
    let res = exec.map(samples, |s| sample_eval(model, params, s, w));
    let mut l = 0.0;
    let mut mu = 0.0;
    for r in res {
        let (a, b) = r?;
        l += a;
        mu += b;
    }
    let n = samples.len() as f64;
    Ok((l / n, mu / n))
}

/// Validation loss and mean μ over `samples`.
pub fn evaluate<E: Executor>(
    exec: &E,
    model: &ModelSpec,
    params: &ParamStore,
    samples: &[TrainSample],
    w: &LossWeights,
) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::Config("no samples to evaluate".into()));
    }
    mean_eval(exec, model, params, samples, w)
}

fn epoch_batches(cfg: &TrainConfig, epoch: usize, train: &[TrainSample]) -> Result<Vec<Vec<TrainSample>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64 + 1).wrapping_mul(0xA076_1D64_78BD_642F));
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng);
    let mut out = Vec::new();
    for chunk in order.chunks(cfg.batch_size) {
        let mut batch = Vec::with_capacity(chunk.len());
        for &i in chunk {
            let s = &train[i];
            let g = s.truth.grid();
            batch.push(match cfg.patch {
                Some(p) if p < g.n_y || p < g.n_x => {
                    let (ph, pw) = (p.min(g.n_y), p.min(g.n_x));
                    let y0 = rng.random_range(0..=g.n_y - ph);
                    let x0 = rng.random_range(0..=g.n_x - pw);
                    s.crop(y0, x0, ph, pw)?
                }
                _ => s.clone(),
            });
        }
        out.push(batch);
    }
    Ok(out)
}

fn global_norm(g: &ParamStore) -> f64 {
    libm::sqrt(g.iter().map(|(_, t)| t.sum_sq()).sum())
}

/// Trains from `state` until `cfg.epochs`. `on_epoch` sees every finished
/// epoch (for checkpointing and logging).
pub fn train_loop<E: Executor>(
    exec: &E,
    model: &ModelSpec,
    cfg: &TrainConfig,
    train: &[TrainSample],
    val: &[TrainSample],
    mut state: TrainState,
    on_epoch: &mut dyn FnMut(&TrainState) -> Result<()>,
) -> Result<TrainState> {
    cfg.validate()?;
    model.validate()?;
    if train.is_empty() && cfg.epochs > state.epoch {
        return Err(Error::Config("no training samples".into()));
    }
    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let lr = cfg.lr_at(epoch);
        let k = cfg.unroll_at(epoch);
        let diverged = |state: &TrainState| Error::TrainingDivergence { epoch, last_good: Box::new(state.params.clone()) };
        let mut loss_sum = 0.0;
        let mut count = 0usize;
        for batch in epoch_batches(cfg, epoch, train)? {
            let results = exec.map(&batch, |s| sample_loss_grad(model, &state.params, s, &cfg.weights, k));
            let mut acc = state.params.zeros_like();
            for r in results {
                let (l, g) = match r {
                    Ok(v) => v,
                    Err(e) if e.is_divergence() => return Err(diverged(&state)),
                    Err(e) => return Err(e),
                };
                loss_sum += l;
                count += 1;
                acc.axpy(1.0, &g);
            }
            let n = batch.len() as f64;
            for (_, t) in acc.iter_mut() {
                t.data_mut().iter_mut().for_each(|v| *v /= n);
            }
            if let Some(c) = cfg.clip_norm {
                let gn = global_norm(&acc);
                if gn > c {
                    for (_, t) in acc.iter_mut() {
                        t.data_mut().iter_mut().for_each(|v| *v *= c / gn);
                    }
                }
            }
            if !acc.is_finite() {
                return Err(diverged(&state));
            }
            let mut next = state.params.clone();
            let mut adam = state.adam.clone();
            adam_step(&mut next, &acc, &mut adam, lr)?;
            if !next.is_finite() {
                return Err(diverged(&state));
            }
            state.params = next;
            state.adam = adam;
        }
        let train_loss = loss_sum / count.max(1) as f64;
        let (val_loss, val_mu) = if !val.is_empty() && ((epoch + 1) % cfg.val_every == 0 || epoch + 1 == cfg.epochs) {
            match evaluate(exec, model, &state.params, val, &cfg.weights) {
                Ok((l, m)) if l.is_finite() => (Some(l), Some(m)),
                Ok(_) => return Err(diverged(&state)),
                Err(e) if e.is_divergence() => return Err(diverged(&state)),
                Err(e) => return Err(e),
            }
        } else {
            (None, None)
        };
        if let Some(v) = val_loss {
            if state.best_val.is_none_or(|b| v < b) {
                state.best_val = Some(v);
                state.best_params = state.params.clone();
            }
        }
        log::info!("epoch {epoch}: K={k} lr={lr:.2e} train={train_loss:.6e} val={val_loss:?} mu={val_mu:?}");
        state.history.push(EpochRecord { epoch, lr, n_iters: k, train_loss, val_loss, val_mu });
        state.epoch += 1;
        on_epoch(&state)?;
    }
    if state.best_val.is_none() {
        state.best_params = state.params.clone();
    }
    Ok(state)
}
