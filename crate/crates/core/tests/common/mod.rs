#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use varinv_core::fields::{FieldStack, GridSpec, ObsModality, ObsSet, StateSeq};
use varinv_core::gradcore::{grad_check, BoundParams, ParamStore, Shape, Tensor};
use varinv_core::obsops::{init_obs_params, ObsConstants, ObsTermSpec, TermKind};
use varinv_core::priornet::{phi_init, PhiConfig};
use varinv_core::varcost::{cost_node, CostConfig};

pub const EPS: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_stack(g: GridSpec, seed: u64) -> FieldStack {
    let mut r = rng(seed);
    FieldStack::from_fn(g, |_, _, _| r.random_range(-1.0..1.0)).unwrap()
}

pub fn rand_mask(g: GridSpec, seed: u64, p: f64) -> FieldStack {
    let mut r = rng(seed);
    FieldStack::from_fn(g, |_, _, _| if r.random_bool(p) { 1.0 } else { 0.0 }).unwrap()
}

pub fn rand_state(g: GridSpec, seed: u64) -> StateSeq {
    StateSeq::new(rand_stack(g, seed), rand_stack(g, seed + 1000)).unwrap()
}

pub fn rand_tensor(shape: Shape, seed: u64, scale: f64) -> Tensor {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| scale * r.random_range(-1.0..1.0))
}

/// Masked SSH (1), gap-free large-scale SSH (2) and dense SST (3).
pub fn rand_obs(g: GridSpec, seed: u64) -> ObsSet {
    let y1 = ObsModality::new(1, rand_stack(g, seed), rand_mask(g, seed + 1, 0.4)).unwrap();
    let y2 = ObsModality::full(2, rand_stack(g, seed + 2));
    let y3 = ObsModality::full(3, rand_stack(g, seed + 3));
    ObsSet::new(vec![y1, y2, y3]).unwrap()
}

pub fn small_phi() -> PhiConfig {
    PhiConfig { base_channels: 2, ..Default::default() }
}

/// One term of every kind plus the prior, with small feature-pair kernels.
pub fn full_cost() -> CostConfig {
    let mut fp = ObsTermSpec::new(3, 1, TermKind::FeaturePair, 0.7);
    fp.channels = 2;
    CostConfig {
        terms: vec![
            ObsTermSpec::new(1, 1, TermKind::MaskedIdentity, 2.0),
            ObsTermSpec::new(2, 1, TermKind::LargeScale, 0.5),
            fp,
            ObsTermSpec::new(3, 2, TermKind::Advection, 0.3),
        ],
        gamma: 0.8,
        prior: small_phi(),
    }
}

/// Prior with every slice random (head included) so that `x − Φ(x)` does not
/// vanish and no gradient coordinate is negligible next to the others.
pub fn rand_phi(cfg: &PhiConfig, n_t: usize, seed: u64) -> ParamStore {
    let mut p = phi_init(cfg, n_t, seed).unwrap();
    for (k, (_, t)) in p.iter_mut().enumerate() {
        *t = rand_tensor(t.shape(), seed + 100 + k as u64, 0.4);
    }
    p
}

pub fn cost_params(cfg: &CostConfig, n_t: usize, seed: u64) -> ParamStore {
    let mut p = init_obs_params(&cfg.terms, seed);
    if cfg.gamma > 0.0 {
        p.extend(rand_phi(&cfg.prior, n_t, seed + 1));
    }
    p
}

/// FD check of `U` jointly in the state and every parameter slice.
pub fn cost_fd_error(cfg: &CostConfig, obs: &ObsSet, params: &ParamStore, s: &StateSeq) -> f64 {
    let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
    let mut inputs = vec![s.to_tensor()];
    inputs.extend(params.iter().map(|(_, t)| t.clone()));
    grad_check(
        |tape, ids| {
            let consts = ObsConstants::new(tape, obs, &cfg.terms)?;
            let bound: BoundParams = names.iter().cloned().zip(ids[1..].iter().copied()).collect();
            Ok(cost_node(tape, cfg, &consts, &bound, ids[0])?.total)
        },
        &inputs,
        EPS,
    )
    .unwrap()
}

pub fn f64s(f: &FieldStack) -> Vec<f64> {
    f.data().iter().map(|&v| v as f64).collect()
}

pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

/// One 7-frame window from a small generated OSSE, with OI large-scale field and SST.
pub fn osse_sample(n: usize, seed: u64) -> varinv_core::osse::TrainSample {
    use varinv_core::baselines::{optimal_interp, OIConfig};
    use varinv_core::osse::{generate, make_dataset, MaskConfig, SynthConfig};
    let mut synth = SynthConfig::desk(seed);
    synth.grid = GridSpec::new(7, n, n, 0.05, 1.0).unwrap();
    synth.lambda0 = 8.0 * synth.grid.dx;
    let o = generate(&synth, &MaskConfig::desk(seed + 1)).unwrap();
    let y2 = optimal_interp(&o.y1, &OIConfig::desk()).unwrap();
    make_dataset(&o.truth, &o.y1, &y2, Some(&o.sst), &[0], 7).unwrap().remove(0)
}
