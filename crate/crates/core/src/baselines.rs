//! Reference mappers: space–time optimal interpolation of the altimetry and a
//! one-pass U-Net inversion of stacked observation channels.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{FieldStack, GridSpec, ObsModality, ObsSet};
use crate::gradcore::{ParamStore, Tape};
use crate::priornet::unet_node;
use crate::train::{direct_input, DIRECT_PREFIX};

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OIConfig {
    /// Spatial length scale, in the units of `dx`.
    pub lx: f64,
    /// Temporal length scale, in the units of `dt`.
    pub lt: f64,
    pub noise_var: f64,
    pub signal_var: f64,
    pub max_obs: usize,
    /// Keeps every `thin`-th observed cell.
    pub thin: usize,
    /// Observations farther than this in time are ignored; defaults to `2·lt`.
    #[serde(default)]
    pub t_radius: Option<f64>,
    /// Removes the mean of each selection and restores it afterwards.
    #[serde(default = "default_true")]
    pub remove_mean: bool,
}

impl OIConfig {
    /// Length scales sized for the 64×64, 0.05-step desk field.
    pub fn desk() -> Self {
        OIConfig { lx: 0.15, lt: 5.0, noise_var: 0.1, signal_var: 1.0, max_obs: 600, thin: 1, t_radius: None, remove_mean: true }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lx > 0.0 && self.lt > 0.0 && self.signal_var > 0.0) {
            return Err(Error::Config("OI length scales and signal variance must be positive".into()));
        }
        if !(self.noise_var >= 0.0) || self.max_obs == 0 || self.thin == 0 {
            return Err(Error::Config("OI needs noise_var >= 0, max_obs > 0 and thin > 0".into()));
        }
        Ok(())
    }

    fn radius(&self) -> f64 {
        self.t_radius.unwrap_or(2.0 * self.lt)
    }
}

/// In-place lower Cholesky factor of the row-major `n × n` matrix `a`.
pub fn cholesky(a: &mut [f64], n: usize) -> Result<()> {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > 0.0) {
            return Err(Error::Numerical(format!("matrix is not positive definite (pivot {j} = {d})")));
        }
        let d = libm::sqrt(d);
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    Ok(())
}

/// Solves `L Lᵀ x = b` in place given the factor from [`cholesky`].
pub fn cholesky_solve(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= l[k * n + i] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

#[derive(Clone, Copy, Debug)]
struct Obs {
    t: usize,
    y: usize,
    x: usize,
    v: f64,
}

fn observed(obs: &ObsModality, thin: usize) -> Vec<Obs> {
    let g = *obs.grid();
    let mut out = Vec::new();
    for t in 0..g.n_t {
        for y in 0..g.n_y {
            for x in 0..g.n_x {
                if obs.mask().get(t, y, x) != 0.0 {
                    out.push(Obs { t, y, x, v: obs.values().get(t, y, x) as f64 });
                }
            }
        }
    }
    out.into_iter().step_by(thin).collect()
}

/// Observations used for day `d`: within the time radius, nearest in time first.
fn select(all: &[Obs], d: usize, g: &GridSpec, cfg: &OIConfig) -> Vec<Obs> {
    let r = cfg.radius();
    let mut sel: Vec<(usize, Obs)> = all
        .iter()
        .copied()
        .filter(|o| (o.t as f64 - d as f64).abs() * g.dt <= r)
        .map(|o| (o.t.abs_diff(d), o))
        .collect();
    if sel.len() > cfg.max_obs {
        // stable: ties keep scan order
        sel.sort_by_key(|p| p.0);
        sel.truncate(cfg.max_obs);
    }
    sel.into_iter().map(|p| p.1).collect()
}

/// Separable Gaussian covariance lookup by integer offsets.
struct Cov {
    sy: Vec<f64>,
    sx: Vec<f64>,
    st: Vec<f64>,
    var: f64,
}

impl Cov {
    fn new(g: &GridSpec, cfg: &OIConfig) -> Self {
        let table = |n: usize, step: f64, l: f64| -> Vec<f64> {
            (0..n).map(|i| {
                let d = i as f64 * step;
                libm::exp(-d * d / (2.0 * l * l))
            }).collect()
        };
        Cov { sy: table(g.n_y, g.dx, cfg.lx), sx: table(g.n_x, g.dx, cfg.lx), st: table(g.n_t, g.dt, cfg.lt), var: cfg.signal_var }
    }

    fn at(&self, a: (usize, usize, usize), b: (usize, usize, usize)) -> f64 {
        self.var * self.st[a.0.abs_diff(b.0)] * self.sy[a.1.abs_diff(b.1)] * self.sx[a.2.abs_diff(b.2)]
    }
}

struct Solved {
    sel: Vec<Obs>,
    chol: Vec<f64>,
    alpha: Vec<f64>,
    mean: f64,
}

fn solve_day(all: &[Obs], d: usize, g: &GridSpec, cfg: &OIConfig, cov: &Cov) -> Result<Solved> {
    let sel = select(all, d, g, cfg);
    let n = sel.len();
    let mean = if cfg.remove_mean && n > 0 { sel.iter().map(|o| o.v).sum::<f64>() / n as f64 } else { 0.0 };
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let c = cov.at((sel[i].t, sel[i].y, sel[i].x), (sel[j].t, sel[j].y, sel[j].x));
            k[i * n + j] = c;
            k[j * n + i] = c;
        }
        k[i * n + i] += cfg.noise_var + 1e-8 * cfg.signal_var;
    }
    cholesky(&mut k, n)?;
    let mut alpha: Vec<f64> = sel.iter().map(|o| o.v - mean).collect();
    cholesky_solve(&k, n, &mut alpha);
    Ok(Solved { sel, chol: k, alpha, mean })
}

/// Gauss–Markov estimate of every frame from the observed cells of `obs`,
/// in 64 bits and `[t][y][x]` order.
pub fn oi_estimate(obs: &ObsModality, cfg: &OIConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let g = *obs.grid();
    let all = observed(obs, cfg.thin);
    if all.is_empty() {
        log::warn!("optimal interpolation without observations returns the zero prior mean");
        return Ok(vec![0.0; g.len()]);
    }
    let cov = Cov::new(&g, cfg);
    let mut out = Vec::with_capacity(g.len());
    for d in 0..g.n_t {
        let s = solve_day(&all, d, &g, cfg, &cov)?;
        for y in 0..g.n_y {
            for x in 0..g.n_x {
                let mut v = s.mean;
                for (o, a) in s.sel.iter().zip(&s.alpha) {
                    v += cov.at((d, y, x), (o.t, o.y, o.x)) * a;
                }
                out.push(v);
            }
        }
    }
    Ok(out)
}

/// [`oi_estimate`] stored as a field.
pub fn optimal_interp(obs: &ObsModality, cfg: &OIConfig) -> Result<FieldStack> {
    FieldStack::new(*obs.grid(), oi_estimate(obs, cfg)?.into_iter().map(|v| v as f32).collect())
}

/// Pointwise posterior variance `σ²_s − kᵀ(K + σ²_n I)⁻¹k` for the same
/// observation selection as [`optimal_interp`], in 64 bits.
pub fn posterior_variance(obs: &ObsModality, cfg: &OIConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let g = *obs.grid();
    let all = observed(obs, cfg.thin);
    let cov = Cov::new(&g, cfg);
    let mut out = Vec::with_capacity(g.len());
    for d in 0..g.n_t {
        let s = solve_day(&all, d, &g, cfg, &cov)?;
        let n = s.sel.len();
        for y in 0..g.n_y {
            for x in 0..g.n_x {
                let kp: Vec<f64> = s.sel.iter().map(|o| cov.at((d, y, x), (o.t, o.y, o.x))).collect();
                let mut w = kp.clone();
                cholesky_solve(&s.chol, n, &mut w);
                let red: f64 = kp.iter().zip(&w).map(|(a, b)| a * b).sum();
                out.push(cfg.signal_var - red);
            }
        }
    }
    Ok(out)
}

/// One forward pass of the direct-inversion network.
pub fn direct_inversion(params: &ParamStore, obs: &ObsSet, use_sst: bool) -> Result<FieldStack> {
    let g = *obs.grid().ok_or_else(|| Error::Config("empty observation set".into()))?;
    let input = direct_input(obs, use_sst)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let w = bound.get(&format!("{DIRECT_PREFIX}.enc.w"))?;
    if tape.shape(w).c() != input.shape().c() {
        return Err(Error::Shape(format!(
            "network expects {} input channels, observations provide {}",
            tape.shape(w).c(),
            input.shape().c()
        )));
    }
    let x = tape.constant(input);
    let out = unet_node(&mut tape, &bound, DIRECT_PREFIX, x)?;
    FieldStack::from_tensor(g, tape.value(out))
}
