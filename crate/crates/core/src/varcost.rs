//! The variational cost `U(x) = Σ λ_{m,n} ‖G_{m,n}(y_m, x)‖² + γ ‖x − Φ(x)‖²`.
//!
//! Norms are plain sums of squares; weights absorb any area or frame scaling.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{ensure_same_grid, ObsSet, StateSeq};
use crate::gradcore::{BoundParams, NodeId, ParamStore, Tape, Tensor};
use crate::obsops::{term_norm_node, ObsConstants, ObsTermSpec, TermKind};
use crate::priornet::{phi_residual_node, PhiConfig};

pub const PRIOR_TERM: &str = "prior";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostConfig {
    pub terms: Vec<ObsTermSpec>,
    pub gamma: f64,
    #[serde(default)]
    pub prior: PhiConfig,
}

impl CostConfig {
    /// SSH-only or SSH+SST cost with the desk-scale default weights.
    pub fn desk(with_sst: bool) -> Self {
        let mut terms = vec![
            ObsTermSpec::new(1, 1, TermKind::MaskedIdentity, 50.0),
            ObsTermSpec::new(2, 1, TermKind::LargeScale, 1.0),
        ];
        if with_sst {
            terms.push(ObsTermSpec::new(3, 1, TermKind::FeaturePair, 10.0));
        }
        CostConfig { terms, gamma: 1.0, prior: PhiConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        for t in &self.terms {
            t.validate()?;
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be finite and >= 0, got {}", self.gamma)));
        }
        if self.gamma == 0.0 && self.terms.iter().all(|t| t.weight == 0.0) {
            return Err(Error::Config("cost needs a positive term weight or gamma > 0".into()));
        }
        let mut ids: Vec<String> = self.terms.iter().map(|t| t.id()).collect();
        ids.sort();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("duplicate observation term ids".into()));
        }
        self.prior.validate()
    }

    pub fn modalities(&self) -> Vec<usize> {
        let mut m: Vec<usize> = self.terms.iter().map(|t| t.modality).collect();
        m.sort_unstable();
        m.dedup();
        m
    }
}

/// Weighted term nodes and their sum, in configuration order with the prior last.
pub struct CostNodes {
    pub total: NodeId,
    pub terms: Vec<(String, NodeId)>,
}

/// Records `U` for the packed state node `x`.
pub fn cost_node(
    tape: &mut Tape,
    cfg: &CostConfig,
    consts: &ObsConstants,
    params: &BoundParams,
    x: NodeId,
) -> Result<CostNodes> {
    let mut terms = Vec::with_capacity(cfg.terms.len() + 1);
    for spec in &cfg.terms {
        let n = term_norm_node(tape, spec, consts, x, params)?;
        terms.push((spec.id(), tape.scale(n, spec.weight)));
    }
    if cfg.gamma > 0.0 {
        let n = phi_residual_node(tape, params, x)?;
        terms.push((PRIOR_TERM.to_string(), tape.scale(n, cfg.gamma)));
    }
    let mut total = terms[0].1;
    for &(_, n) in &terms[1..] {
        total = tape.add(total, n)?;
    }
    Ok(CostNodes { total, terms })
}

fn check_inputs(s: &StateSeq, obs: &ObsSet, cfg: &CostConfig) -> Result<()> {
    cfg.validate()?;
    for m in cfg.modalities() {
        ensure_same_grid(obs.require(m)?.grid(), s.grid())?;
    }
    Ok(())
}

fn with_cost<T>(
    s: &StateSeq,
    obs: &ObsSet,
    params: &ParamStore,
    cfg: &CostConfig,
    f: impl FnOnce(&mut Tape, NodeId, CostNodes) -> Result<T>,
) -> Result<T> {
    check_inputs(s, obs, cfg)?;
    let mut tape = Tape::new();
    let consts = ObsConstants::new(&mut tape, obs, &cfg.terms)?;
    let bound = params.bind(&mut tape, false);
    let x = tape.var(s.to_tensor());
    let nodes = cost_node(&mut tape, cfg, &consts, &bound, x)?;
    let u = tape.value(nodes.total).item();
    if !u.is_finite() {
        return Err(Error::NonFinite(format!("cost evaluated to {u}")));
    }
    f(&mut tape, x, nodes)
}

pub fn cost_eval(s: &StateSeq, obs: &ObsSet, params: &ParamStore, cfg: &CostConfig) -> Result<f64> {
    with_cost(s, obs, params, cfg, |tape, _, nodes| Ok(tape.value(nodes.total).item()))
}

/// `∇ₓU` as a packed `[1, 2T, H, W]` tensor in 64-bit precision.
pub fn cost_grad_tensor(s: &StateSeq, obs: &ObsSet, params: &ParamStore, cfg: &CostConfig) -> Result<Tensor> {
    with_cost(s, obs, params, cfg, |tape, x, nodes| Ok(tape.grad_values(nodes.total, &[x])?.remove(0)))
}

pub fn cost_grad(s: &StateSeq, obs: &ObsSet, params: &ParamStore, cfg: &CostConfig) -> Result<StateSeq> {
    let g = cost_grad_tensor(s, obs, params, cfg)?;
    StateSeq::from_tensor(*s.grid(), &g)
}

/// Weighted value of each term; the values sum to [`cost_eval`] in order.
pub fn term_breakdown(s: &StateSeq, obs: &ObsSet, params: &ParamStore, cfg: &CostConfig) -> Result<BTreeMap<String, f64>> {
    with_cost(s, obs, params, cfg, |tape, _, nodes| {
        Ok(nodes.terms.iter().map(|(id, n)| (id.clone(), tape.value(*n).item())).collect())
    })
}

/// Term values in evaluation order, whose left-to-right sum is `U`.
pub fn term_values(s: &StateSeq, obs: &ObsSet, params: &ParamStore, cfg: &CostConfig) -> Result<Vec<(String, f64)>> {
    with_cost(s, obs, params, cfg, |tape, _, nodes| {
        Ok(nodes.terms.iter().map(|(id, n)| (id.clone(), tape.value(*n).item())).collect())
    })
}
