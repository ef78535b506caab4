//! Two-scale U-Net with bilinear blocks, used as the trainable prior Φ and,
//! with a different head, as the direct-inversion baseline.
//!
//! Layout: encoder block → avgpool2 → coarse block → bilinear upsampling →
//! concat with the encoder output → decoder block → 1×1 projection. A block
//! is `tanh(conv(u) + conv_a(u) ⊙ conv_b(u))` with per-channel biases on each
//! convolution; without the bilinear unit it is `tanh(conv(u))`.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::StateSeq;
use crate::gradcore::{normal_tensor, BoundParams, NodeId, ParamStore, Shape, Tape, Tensor};

pub const PHI_PREFIX: &str = "phi";

fn default_base() -> usize {
    16
}
fn default_kernel() -> usize {
    3
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhiConfig {
    #[serde(default = "default_base")]
    pub base_channels: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default = "default_true")]
    pub use_bilinear: bool,
}

impl Default for PhiConfig {
    fn default() -> Self {
        PhiConfig { base_channels: default_base(), kernel: default_kernel(), use_bilinear: true }
    }
}

impl PhiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "prior network needs base_channels > 0 and an odd kernel (got {}, {})",
                self.base_channels, self.kernel
            )));
        }
        Ok(())
    }
}

const BLOCKS: [&str; 3] = ["enc", "mid", "dec"];

fn block_init(p: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize, k: usize, bilinear: bool) {
    let fan_in = (cin * k * k) as f64;
    let std = 1.0 / libm::sqrt(fan_in);
    let shape = Shape::new(cout, cin, k, k);
    let bias = Shape::new(1, cout, 1, 1);
    p.insert(format!("{name}.w"), normal_tensor(rng, shape, std));
    p.insert(format!("{name}.b"), Tensor::zeros(bias));
    if bilinear {
        // halved scale keeps the product branch small next to the linear one
        for br in ["a", "c"] {
            p.insert(format!("{name}.{br}.w"), normal_tensor(rng, shape, 0.5 * std));
            p.insert(format!("{name}.{br}.b"), Tensor::zeros(bias));
        }
    }
}

/// Seeded parameters for a U-Net under `prefix`; the 1×1 head is zero.
pub fn unet_init(prefix: &str, in_ch: usize, out_ch: usize, cfg: &PhiConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamStore::new();
    let b = cfg.base_channels;
    let ins = [in_ch, b, 2 * b];
    for (blk, cin) in BLOCKS.iter().zip(ins) {
        block_init(&mut p, &mut rng, &format!("{prefix}.{blk}"), cin, b, cfg.kernel, cfg.use_bilinear);
    }
    p.insert(format!("{prefix}.head.w"), Tensor::zeros(Shape::new(out_ch, b, 1, 1)));
    p.insert(format!("{prefix}.head.b"), Tensor::zeros(Shape::new(1, out_ch, 1, 1)));
    Ok(p)
}

fn conv_bias(tape: &mut Tape, params: &BoundParams, name: &str, u: NodeId) -> Result<NodeId> {
    let w = params.get(&format!("{name}.w"))?;
    let b = params.get(&format!("{name}.b"))?;
    let y = tape.conv2d(u, w)?;
    tape.add_bias(y, b)
}

fn block(tape: &mut Tape, params: &BoundParams, name: &str, u: NodeId) -> Result<NodeId> {
    let mut s = conv_bias(tape, params, name, u)?;
    if params.contains(&format!("{name}.a.w")) {
        let a = conv_bias(tape, params, &format!("{name}.a"), u)?;
        let c = conv_bias(tape, params, &format!("{name}.c"), u)?;
        let prod = tape.hadamard(a, c)?;
        s = tape.add(s, prod)?;
    }
    Ok(tape.tanh(s))
}

/// Raw network output (before any skip) for input `x: [N, C, H, W]`.
pub fn unet_node(tape: &mut Tape, params: &BoundParams, prefix: &str, x: NodeId) -> Result<NodeId> {
    let s = tape.shape(x);
    if s.h() % 2 != 0 || s.w() % 2 != 0 {
        return Err(Error::Shape(format!("U-Net needs even raster dims, got {}x{}", s.h(), s.w())));
    }
    let e = block(tape, params, &format!("{prefix}.enc"), x)?;
    let coarse = tape.avgpool2(e)?;
    let m = block(tape, params, &format!("{prefix}.mid"), coarse)?;
    let up = tape.upsample_bilinear2(m);
    let cat = tape.concat_channels(e, up)?;
    let d = block(tape, params, &format!("{prefix}.dec"), cat)?;
    conv_bias(tape, params, &format!("{prefix}.head"), d)
}

/// Φ parameters for a state with `n_t` frames (`2·n_t` channels).
pub fn phi_init(cfg: &PhiConfig, n_t: usize, seed: u64) -> Result<ParamStore> {
    unet_init(PHI_PREFIX, 2 * n_t, 2 * n_t, cfg, seed)
}

/// `Φ(x) = x + net(x)` on a packed state node.
pub fn phi_node(tape: &mut Tape, params: &BoundParams, x: NodeId) -> Result<NodeId> {
    let r = unet_node(tape, params, PHI_PREFIX, x)?;
    tape.add(x, r)
}

/// `‖x − Φ(x)‖²` on a packed state node.
pub fn phi_residual_node(tape: &mut Tape, params: &BoundParams, x: NodeId) -> Result<NodeId> {
    let phi = phi_node(tape, params, x)?;
    let r = tape.sub(x, phi)?;
    Ok(tape.sq_norm(r))
}

pub fn phi_apply(params: &ParamStore, s: &StateSeq) -> Result<StateSeq> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let x = tape.constant(s.to_tensor());
    let y = phi_node(&mut tape, &bound, x)?;
    StateSeq::from_tensor(*s.grid(), tape.value(y))
}

pub fn phi_residual(params: &ParamStore, s: &StateSeq) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let x = tape.constant(s.to_tensor());
    let r = phi_residual_node(&mut tape, &bound, x)?;
    Ok(tape.value(r).item())
}

/// Parameter counts per top-level slice (the name before the first `.`).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParamCounts {
    pub slices: BTreeMap<String, usize>,
    pub total: usize,
}

pub fn count_params(params: &ParamStore) -> ParamCounts {
    let mut out = ParamCounts::default();
    for (name, t) in params.iter() {
        let slice = name.split('.').next().unwrap_or(name).to_string();
        *out.slices.entry(slice).or_insert(0) += t.numel();
        out.total += t.numel();
    }
    out
}
