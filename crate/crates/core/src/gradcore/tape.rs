//! Tape-based reverse-mode differentiation.
//!
//! Every primitive records its forward value on the [`Tape`]. Gradients are
//! produced by [`Tape::grad`], which appends the vector-Jacobian products to
//! the same tape as ordinary primitives. The recorded gradient is therefore
//! itself differentiable, which the unrolled solver relies on: it feeds
//! ∇ₓU into the update and training differentiates through that update.
//! [`Tape::backward`] is the numeric convenience wrapper: it records the
//! gradient graph, reads the values out and truncates the tape again.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

// Unused when std is linked (tests), whose inherent float methods take precedence.
#[allow(unused_imports)]
use num_traits::Float;

use super::kernels;
use super::tensor::{Shape, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

// Some payloads are only read through `Debug`.
#[allow(dead_code)]
#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Affine(NodeId, f64, f64),
    Hadamard(NodeId, NodeId),
    ScaleBy(NodeId, NodeId),
    Dot(NodeId, NodeId),
    Sum(NodeId),
    Fill(NodeId, Shape),
    Conv2d(NodeId, NodeId),
    ConvWeightGrad(NodeId, NodeId, usize, usize),
    KernelFlip(NodeId),
    AddBias(NodeId, NodeId),
    ChannelSum(NodeId),
    BroadcastChannel(NodeId, Shape),
    Relu(NodeId),
    Step(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Powf(NodeId, f64),
    AvgPool2(NodeId),
    UpsampleNearest2(NodeId),
    UpsampleBilinear2(NodeId),
    UpsampleBilinear2Adj(NodeId),
    Concat(NodeId, NodeId),
    Slice(NodeId, usize, usize),
    Embed(NodeId, usize, usize),
    Reshape(NodeId, Shape),
    MaskedSqNorm(NodeId, NodeId),
    Diff(NodeId, f64, bool),
    DiffAdj(NodeId, f64, bool),
}

impl Op {
    fn inputs(&self) -> [Option<NodeId>; 2] {
        use Op::*;
        match *self {
            Leaf => [None, None],
            Add(a, b) | Sub(a, b) | Hadamard(a, b) | ScaleBy(a, b) | Dot(a, b) | Conv2d(a, b)
            | ConvWeightGrad(a, b, _, _) | AddBias(a, b) | Concat(a, b) | MaskedSqNorm(a, b) => [Some(a), Some(b)],
            Affine(a, ..) | Sum(a) | Fill(a, _) | KernelFlip(a) | ChannelSum(a) | BroadcastChannel(a, _) | Relu(a)
            | Step(a) | Tanh(a) | Sigmoid(a) | Powf(a, _) | AvgPool2(a) | UpsampleNearest2(a)
            | UpsampleBilinear2(a) | UpsampleBilinear2Adj(a) | Slice(a, ..) | Embed(a, ..) | Reshape(a, _)
            | Diff(a, ..) | DiffAdj(a, ..) => [Some(a), None],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Topologically ordered record of primitive applications.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Numeric gradients for the `requires_grad` leaves of a tape.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: BTreeMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.remove(&id)
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.shape().0, b.shape().0)));
    }
    Ok(())
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_vec(a.shape(), a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()).expect("zip")
}

fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_vec(a.shape(), a.data().iter().map(|&x| f(x)).collect()).expect("map")
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after the first `len`.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let requires_grad = op.inputs().iter().flatten().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node { op, value, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn var(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node { op: Op::Leaf, value, requires_grad: true });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant leaf.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node { op: Op::Leaf, value, requires_grad: false });
        NodeId(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        same_shape(self.value(a), self.value(b), "add")?;
        let v = zip(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        same_shape(self.value(a), self.value(b), "sub")?;
        let v = zip(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(Op::Sub(a, b), v))
    }

    /// `alpha · a + beta`.
    pub fn affine(&mut self, a: NodeId, alpha: f64, beta: f64) -> NodeId {
        let v = map(self.value(a), |x| alpha * x + beta);
        self.push(Op::Affine(a, alpha, beta), v)
    }

    pub fn scale(&mut self, a: NodeId, alpha: f64) -> NodeId {
        self.affine(a, alpha, 0.0)
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        same_shape(self.value(a), self.value(b), "hadamard")?;
        let v = zip(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(Op::Hadamard(a, b), v))
    }

    /// Tensor times a one-element node.
    pub fn scale_by(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        if !self.shape(s).is_scalar() {
            return Err(Error::Shape("scale_by expects a scalar factor".into()));
        }
        let k = self.value(s).item();
        let v = map(self.value(a), |x| k * x);
        Ok(self.push(Op::ScaleBy(a, s), v))
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        same_shape(self.value(a), self.value(b), "dot")?;
        let v = Tensor::scalar(self.value(a).dot(self.value(b)));
        Ok(self.push(Op::Dot(a, b), v))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).data().iter().sum());
        self.push(Op::Sum(a), v)
    }

    /// Broadcasts a scalar node to `shape`.
    pub fn fill(&mut self, s: NodeId, shape: Shape) -> Result<NodeId> {
        if !self.shape(s).is_scalar() {
            return Err(Error::Shape("fill expects a scalar".into()));
        }
        let v = Tensor::full(shape, self.value(s).item());
        Ok(self.push(Op::Fill(s, shape), v))
    }

    /// Same-padded stride-1 convolution; `w: [Co, Ci, k, k]` with odd `k`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if ws.c() != xs.c() || ws.h() % 2 == 0 || ws.w() % 2 == 0 {
            return Err(Error::Shape(format!("conv2d input {:?} with kernel {:?}", xs.0, ws.0)));
        }
        let v = kernels::conv2d(self.value(x), self.value(w));
        Ok(self.push(Op::Conv2d(x, w), v))
    }

    fn conv_weight_grad(&mut self, x: NodeId, u: NodeId, kh: usize, kw: usize) -> NodeId {
        let v = kernels::conv_weight_grad(self.value(x), self.value(u), kh, kw);
        self.push(Op::ConvWeightGrad(x, u, kh, kw), v)
    }

    fn kernel_flip(&mut self, w: NodeId) -> NodeId {
        let v = kernels::kernel_flip(self.value(w));
        self.push(Op::KernelFlip(w), v)
    }

    /// Adds a per-channel bias `b: [1, C, 1, 1]`.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (xs, bs) = (self.shape(x), self.shape(b));
        if bs.numel() != xs.c() {
            return Err(Error::Shape(format!("bias {:?} for input {:?}", bs.0, xs.0)));
        }
        let bb = kernels::broadcast_channel(self.value(b), xs);
        let v = zip(self.value(x), &bb, |p, q| p + q);
        Ok(self.push(Op::AddBias(x, b), v))
    }

    pub fn channel_sum(&mut self, x: NodeId) -> NodeId {
        let v = kernels::channel_sum(self.value(x));
        self.push(Op::ChannelSum(x), v)
    }

    fn broadcast_channel(&mut self, b: NodeId, shape: Shape) -> NodeId {
        let v = kernels::broadcast_channel(self.value(b), shape);
        self.push(Op::BroadcastChannel(b, shape), v)
    }

    /// Rectifier; the subgradient at 0 is 0.
    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = map(self.value(a), |x| if x > 0.0 { x } else { 0.0 });
        self.push(Op::Relu(a), v)
    }

    fn step(&mut self, a: NodeId) -> NodeId {
        let v = map(self.value(a), |x| if x > 0.0 { 1.0 } else { 0.0 });
        self.push(Op::Step(a), v)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = map(self.value(a), |x| x.tanh());
        self.push(Op::Tanh(a), v)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = map(self.value(a), |x| 1.0 / (1.0 + (-x).exp()));
        self.push(Op::Sigmoid(a), v)
    }

    /// Elementwise `a^p`; inputs must be positive unless `p` is an integer.
    pub fn powf(&mut self, a: NodeId, p: f64) -> NodeId {
        let v = map(self.value(a), |x| x.powf(p));
        self.push(Op::Powf(a, p), v)
    }

    pub fn avgpool2(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a);
        if s.h() % 2 != 0 || s.w() % 2 != 0 {
            return Err(Error::UnsupportedShape(format!("avgpool2 needs even extents, got {}x{}", s.h(), s.w())));
        }
        let v = kernels::avgpool2(self.value(a));
        Ok(self.push(Op::AvgPool2(a), v))
    }

    pub fn upsample_nearest2(&mut self, a: NodeId) -> NodeId {
        let v = kernels::upsample_nearest2(self.value(a));
        self.push(Op::UpsampleNearest2(a), v)
    }

    pub fn upsample_bilinear2(&mut self, a: NodeId) -> NodeId {
        let v = kernels::upsample_bilinear2(self.value(a));
        self.push(Op::UpsampleBilinear2(a), v)
    }

    fn upsample_bilinear2_adj(&mut self, a: NodeId) -> NodeId {
        let v = kernels::upsample_bilinear2_adj(self.value(a));
        self.push(Op::UpsampleBilinear2Adj(a), v)
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.n() != sb.n() || sa.h() != sb.h() || sa.w() != sb.w() {
            return Err(Error::Shape(format!("concat {:?} with {:?}", sa.0, sb.0)));
        }
        let v = kernels::concat_channels(self.value(a), self.value(b));
        Ok(self.push(Op::Concat(a, b), v))
    }

    pub fn slice_channels(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        if start + len > self.shape(a).c() || len == 0 {
            return Err(Error::Shape(format!("channel slice {}..{} of {:?}", start, start + len, self.shape(a).0)));
        }
        let v = kernels::slice_channels(self.value(a), start, len);
        Ok(self.push(Op::Slice(a, start, len), v))
    }

    fn embed_channels(&mut self, a: NodeId, start: usize, total: usize) -> NodeId {
        let v = kernels::embed_channels(self.value(a), start, total);
        self.push(Op::Embed(a, start, total), v)
    }

    pub fn reshape(&mut self, a: NodeId, shape: Shape) -> Result<NodeId> {
        let v = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(Op::Reshape(a, shape), v))
    }

    /// `Σ mask ⊙ r²`. The mask is treated as a constant.
    pub fn masked_sq_norm(&mut self, r: NodeId, mask: NodeId) -> Result<NodeId> {
        same_shape(self.value(r), self.value(mask), "masked_sq_norm")?;
        let s = self.value(r).data().iter().zip(self.value(mask).data()).map(|(x, m)| m * x * x).sum();
        Ok(self.push(Op::MaskedSqNorm(r, mask), Tensor::scalar(s)))
    }

    /// `Σ r²`.
    pub fn sq_norm(&mut self, r: NodeId) -> NodeId {
        let ones = self.constant(Tensor::full(self.shape(r), 1.0));
        self.masked_sq_norm(r, ones).expect("same shape")
    }

    /// ∂/∂x (along W) with step `h`: central inside, one-sided at edges.
    pub fn diff_x(&mut self, a: NodeId, h: f64) -> NodeId {
        let v = kernels::diff(self.value(a), h, true);
        self.push(Op::Diff(a, h, true), v)
    }

    /// ∂/∂y (along H).
    pub fn diff_y(&mut self, a: NodeId, h: f64) -> NodeId {
        let v = kernels::diff(self.value(a), h, false);
        self.push(Op::Diff(a, h, false), v)
    }

    fn diff_adj(&mut self, a: NodeId, h: f64, axis_x: bool) -> NodeId {
        let v = kernels::diff_adj(self.value(a), h, axis_x);
        self.push(Op::DiffAdj(a, h, axis_x), v)
    }

    /// `conv(u; wa) ⊙ conv(u; wb)`, the bilinear unit.
    pub fn bilinear(&mut self, u: NodeId, wa: NodeId, wb: NodeId) -> Result<NodeId> {
        let a = self.conv2d(u, wa)?;
        let b = self.conv2d(u, wb)?;
        self.hadamard(a, b)
    }

    fn accumulate(&mut self, adj: &mut [Option<NodeId>], at: NodeId, g: NodeId) {
        adj[at.0] = Some(match adj[at.0] {
            None => g,
            Some(p) => self.add(p, g).expect("gradient shapes agree"),
        });
    }

    /// Records the gradient of scalar `output` with respect to `wrt` as new
    /// tape nodes. Entries are `None` when no path connects the node.
    pub fn grad(&mut self, output: NodeId, wrt: &[NodeId]) -> Result<Vec<Option<NodeId>>> {
        if !self.shape(output).is_scalar() {
            return Err(Error::Usage(format!("gradient of non-scalar node with shape {:?}", self.shape(output).0)));
        }
        let n = output.0 + 1;
        let Some(lo) = wrt.iter().map(|w| w.0).filter(|&w| w < n).min() else {
            return Ok(vec![None; wrt.len()]);
        };
        let mut dep = vec![false; n];
        for w in wrt {
            if w.0 < n {
                dep[w.0] = true;
            }
        }
        for i in lo..n {
            if !dep[i] {
                dep[i] = self.nodes[i].op.inputs().iter().flatten().any(|j| dep[j.0]);
            }
        }
        let mut adj: Vec<Option<NodeId>> = vec![None; n];
        if dep[output.0] {
            adj[output.0] = Some(self.constant(Tensor::scalar(1.0)));
        }
        for i in (lo..n).rev() {
            let Some(v) = adj[i] else { continue };
            if !dep[i] {
                continue;
            }
            let me = NodeId(i);
            let op = self.nodes[i].op.clone();
            let d = |k: NodeId| dep[k.0];
            use Op::*;
            match op {
                Leaf => {}
                Add(a, b) => {
                    if d(a) {
                        self.accumulate(&mut adj, a, v);
                    }
                    if d(b) {
                        self.accumulate(&mut adj, b, v);
                    }
                }
                Sub(a, b) => {
                    if d(a) {
                        self.accumulate(&mut adj, a, v);
                    }
                    if d(b) {
                        let g = self.scale(v, -1.0);
                        self.accumulate(&mut adj, b, g);
                    }
                }
                Affine(a, alpha, _) => {
                    let g = self.scale(v, alpha);
                    self.accumulate(&mut adj, a, g);
                }
                Hadamard(a, b) => {
                    if d(a) {
                        let g = self.hadamard(v, b)?;
                        self.accumulate(&mut adj, a, g);
                    }
                    if d(b) {
                        let g = self.hadamard(v, a)?;
                        self.accumulate(&mut adj, b, g);
                    }
                }
                ScaleBy(a, s) => {
                    if d(a) {
                        let g = self.scale_by(v, s)?;
                        self.accumulate(&mut adj, a, g);
                    }
                    if d(s) {
                        let g = self.dot(v, a)?;
                        self.accumulate(&mut adj, s, g);
                    }
                }
                Dot(a, b) => {
                    if d(a) {
                        let g = self.scale_by(b, v)?;
                        self.accumulate(&mut adj, a, g);
                    }
                    if d(b) {
                        let g = self.scale_by(a, v)?;
                        self.accumulate(&mut adj, b, g);
                    }
                }
                Sum(a) => {
                    let g = self.fill(v, self.shape(a))?;
                    self.accumulate(&mut adj, a, g);
                }
                Fill(s, _) => {
                    let g = self.sum(v);
                    self.accumulate(&mut adj, s, g);
                }
                Conv2d(x, w) => {
                    if d(x) {
                        let wf = self.kernel_flip(w);
                        let g = self.conv2d(v, wf)?;
                        self.accumulate(&mut adj, x, g);
                    }
                    if d(w) {
                        let s = self.shape(w);
                        let g = self.conv_weight_grad(x, v, s.h(), s.w());
                        self.accumulate(&mut adj, w, g);
                    }
                }
                ConvWeightGrad(x, u, _, _) => {
                    if d(x) {
                        let vf = self.kernel_flip(v);
                        let g = self.conv2d(u, vf)?;
                        self.accumulate(&mut adj, x, g);
                    }
                    if d(u) {
                        let g = self.conv2d(x, v)?;
                        self.accumulate(&mut adj, u, g);
                    }
                }
                KernelFlip(w) => {
                    let g = self.kernel_flip(v);
                    self.accumulate(&mut adj, w, g);
                }
                AddBias(x, b) => {
                    if d(x) {
                        self.accumulate(&mut adj, x, v);
                    }
                    if d(b) {
                        let g = self.channel_sum(v);
                        let g = self.reshape(g, self.shape(b))?;
                        self.accumulate(&mut adj, b, g);
                    }
                }
                ChannelSum(x) => {
                    let g = self.broadcast_channel(v, self.shape(x));
                    self.accumulate(&mut adj, x, g);
                }
                BroadcastChannel(b, _) => {
                    let g = self.channel_sum(v);
                    let g = self.reshape(g, self.shape(b))?;
                    self.accumulate(&mut adj, b, g);
                }
                Relu(a) => {
                    let s = self.step(a);
                    let g = self.hadamard(v, s)?;
                    self.accumulate(&mut adj, a, g);
                }
                Step(_) => {}
                Tanh(a) => {
                    let yy = self.hadamard(me, me)?;
                    let dy = self.affine(yy, -1.0, 1.0);
                    let g = self.hadamard(v, dy)?;
                    self.accumulate(&mut adj, a, g);
                }
                Sigmoid(a) => {
                    let one_minus = self.affine(me, -1.0, 1.0);
                    let dy = self.hadamard(me, one_minus)?;
                    let g = self.hadamard(v, dy)?;
                    self.accumulate(&mut adj, a, g);
                }
                Powf(a, p) => {
                    let g = if p == 1.0 {
                        v
                    } else {
                        let pm = self.powf(a, p - 1.0);
                        let dy = self.scale(pm, p);
                        self.hadamard(v, dy)?
                    };
                    self.accumulate(&mut adj, a, g);
                }
                AvgPool2(a) => {
                    let up = self.upsample_nearest2(v);
                    let g = self.scale(up, 0.25);
                    self.accumulate(&mut adj, a, g);
                }
                UpsampleNearest2(a) => {
                    let down = self.avgpool2(v)?;
                    let g = self.scale(down, 4.0);
                    self.accumulate(&mut adj, a, g);
                }
                UpsampleBilinear2(a) => {
                    let g = self.upsample_bilinear2_adj(v);
                    self.accumulate(&mut adj, a, g);
                }
                UpsampleBilinear2Adj(a) => {
                    let g = self.upsample_bilinear2(v);
                    self.accumulate(&mut adj, a, g);
                }
                Concat(a, b) => {
                    let ca = self.shape(a).c();
                    if d(a) {
                        let g = self.slice_channels(v, 0, ca)?;
                        self.accumulate(&mut adj, a, g);
                    }
                    if d(b) {
                        let g = self.slice_channels(v, ca, self.shape(b).c())?;
                        self.accumulate(&mut adj, b, g);
                    }
                }
                Slice(a, start, _) => {
                    let g = self.embed_channels(v, start, self.shape(a).c());
                    self.accumulate(&mut adj, a, g);
                }
                Embed(a, start, _) => {
                    let g = self.slice_channels(v, start, self.shape(a).c())?;
                    self.accumulate(&mut adj, a, g);
                }
                Reshape(a, _) => {
                    let g = self.reshape(v, self.shape(a))?;
                    self.accumulate(&mut adj, a, g);
                }
                MaskedSqNorm(r, m) => {
                    if d(r) {
                        let rm = self.hadamard(r, m)?;
                        let two_v = self.scale(v, 2.0);
                        let g = self.scale_by(rm, two_v)?;
                        self.accumulate(&mut adj, r, g);
                    }
                }
                Diff(a, h, ax) => {
                    let g = self.diff_adj(v, h, ax);
                    self.accumulate(&mut adj, a, g);
                }
                DiffAdj(a, h, ax) => {
                    let g = self.push(Op::Diff(v, h, ax), kernels::diff(self.value(v), h, ax));
                    self.accumulate(&mut adj, a, g);
                }
            }
        }
        Ok(wrt.iter().map(|w| if w.0 < n { adj[w.0] } else { None }).collect())
    }

    /// Numeric gradients of scalar `output` for every `requires_grad` leaf
    /// recorded before it. Disconnected leaves get zero gradients. The tape
    /// is left exactly as it was.
    pub fn backward(&mut self, output: NodeId) -> Result<Gradients> {
        let leaves: Vec<NodeId> = (0..=output.0)
            .filter(|&i| matches!(self.nodes[i].op, Op::Leaf) && self.nodes[i].requires_grad)
            .map(NodeId)
            .collect();
        let mark = self.len();
        let gs = self.grad(output, &leaves);
        let gs = match gs {
            Ok(g) => g,
            Err(e) => {
                self.truncate(mark);
                return Err(e);
            }
        };
        let mut grads = BTreeMap::new();
        for (leaf, g) in leaves.iter().zip(gs) {
            let t = match g {
                Some(id) => self.value(id).clone(),
                None => Tensor::zeros(self.shape(*leaf)),
            };
            grads.insert(*leaf, t);
        }
        self.truncate(mark);
        Ok(Gradients { grads })
    }

    /// Gradient values with respect to arbitrary nodes (zero where disconnected).
    /// The tape is restored afterwards.
    pub fn grad_values(&mut self, output: NodeId, wrt: &[NodeId]) -> Result<Vec<Tensor>> {
        let mark = self.len();
        let gs = self.grad(output, wrt);
        let out = gs.map(|gs| {
            gs.iter()
                .zip(wrt)
                .map(|(g, w)| match g {
                    Some(id) => self.value(*id).clone(),
                    None => Tensor::zeros(self.shape(*w)),
                })
                .collect()
        });
        self.truncate(mark);
        out
    }
}
