//! Reverse-mode autodiff over the fixed op set.
//!
//! The tape owns every value produced during a forward pass, records one node
//! per op in topological order, and walks the nodes exactly once in reverse
//! to accumulate gradients. Binarized convolutions backpropagate with the
//! clipped straight-through estimator; everything else uses the exact chain
//! rule. Backward is sequential over nodes, so two runs over identical tapes
//! produce bit-identical gradients.

use std::collections::HashMap;

use crate::bits::{binarize_weights, ste_backward};
use crate::engine::{Engine, Param, ParamId};
use crate::error::{contract_err, Result};
use crate::kernels::{self, conv::Pad2};
use crate::tensor::{Dims, Tensor4};

/// Handle to a value stored on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: TensorId,
        w: TensorId,
        bias: Option<TensorId>,
        stride: usize,
        pad: usize,
    },
    BinConv {
        x: TensorId,
        w: TensorId,
        stride: usize,
        pad: usize,
        scale: f32,
    },
    Add(TensorId, TensorId),
    AddBcast {
        x: TensorId,
        b: TensorId,
    },
    Mul(TensorId, TensorId),
    Scale {
        x: TensorId,
        factor: f32,
    },
    Rprelu {
        x: TensorId,
        gamma: TensorId,
        zeta: TensorId,
        beta: TensorId,
    },
    Silu(TensorId),
    PixelShuffle {
        x: TensorId,
        r: usize,
    },
    PixelUnshuffle {
        x: TensorId,
        r: usize,
    },
    ConcatC(TensorId, TensorId),
    GatherC {
        x: TensorId,
        idx: Vec<usize>,
    },
    SumAll(TensorId),
    MeanAll(TensorId),
    L1(TensorId, TensorId),
}

impl Op {
    fn inputs(&self) -> Vec<TensorId> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, bias, .. } => {
                let mut v = vec![*x, *w];
                if let Some(b) = bias {
                    v.push(*b);
                }
                v
            }
            Op::BinConv { x, w, .. } => vec![*x, *w],
            Op::Add(a, b) | Op::Mul(a, b) | Op::ConcatC(a, b) | Op::L1(a, b) => vec![*a, *b],
            Op::AddBcast { x, b } => vec![*x, *b],
            Op::Scale { x, .. }
            | Op::Silu(x)
            | Op::PixelShuffle { x, .. }
            | Op::PixelUnshuffle { x, .. }
            | Op::GatherC { x, .. }
            | Op::SumAll(x)
            | Op::MeanAll(x) => vec![*x],
            Op::Rprelu {
                x,
                gamma,
                zeta,
                beta,
            } => vec![*x, *gamma, *zeta, *beta],
        }
    }
}

/// Autodiff engine. One training step runs on one tape.
pub struct TapeEngine {
    vals: Vec<Tensor4>,
    ops: Vec<Op>,
    requires: Vec<bool>,
    grads: Vec<Option<Tensor4>>,
    param_map: HashMap<ParamId, TensorId>,
    param_order: Vec<(ParamId, TensorId)>,
    ran_backward: bool,
}

impl Default for TapeEngine {
    fn default() -> Self {
        Self::new()
    }
}

impl TapeEngine {
    pub fn new() -> Self {
        TapeEngine {
            vals: Vec::new(),
            ops: Vec::new(),
            requires: Vec::new(),
            grads: Vec::new(),
            param_map: HashMap::new(),
            param_order: Vec::new(),
            ran_backward: false,
        }
    }

    fn push(&mut self, t: Tensor4, op: Op, what: &str) -> Result<TensorId> {
        t.check_finite(what)?;
        let requires = op.inputs().iter().any(|i| self.requires[i.0]);
        let id = TensorId(self.vals.len());
        self.vals.push(t);
        self.ops.push(op);
        self.requires.push(requires);
        self.grads.push(None);
        Ok(id)
    }

    /// Register an input tensor, optionally participating in gradients.
    pub fn leaf(&mut self, t: Tensor4, requires_grad: bool) -> Result<TensorId> {
        let id = self.push(t, Op::Leaf, "leaf")?;
        self.requires[id.0] = requires_grad;
        Ok(id)
    }

    /// Register a parameter leaf (deduplicated per parameter id).
    pub fn param_leaf(&mut self, p: &Param) -> Result<TensorId> {
        if let Some(&id) = self.param_map.get(&p.id) {
            return Ok(id);
        }
        let id = self.leaf(p.tensor().clone(), true)?;
        self.param_map.insert(p.id, id);
        self.param_order.push((p.id, id));
        Ok(id)
    }

    pub fn value(&self, id: TensorId) -> &Tensor4 {
        &self.vals[id.0]
    }

    /// Gradient of the last backward pass w.r.t. `id`, if any reached it.
    pub fn grad(&self, id: TensorId) -> Option<&Tensor4> {
        self.grads[id.0].as_ref()
    }

    /// (param id, gradient) for every parameter leaf that received gradient.
    pub fn param_grads(&self) -> Vec<(ParamId, &Tensor4)> {
        self.param_order
            .iter()
            .filter_map(|&(pid, tid)| self.grads[tid.0].as_ref().map(|g| (pid, g)))
            .collect()
    }

    pub fn num_nodes(&self) -> usize {
        self.ops.len()
    }

    fn accumulate(&mut self, id: TensorId, g: Tensor4) {
        match &mut self.grads[id.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot => *slot = Some(g),
        }
    }

    /// Reverse sweep from a scalar loss. Gradients accumulate additively
    /// across fan-out; each node is visited exactly once in reverse order.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.vals[loss.0].len() != 1 {
            return contract_err(format!(
                "backward needs a scalar loss, got {} elements",
                self.vals[loss.0].len()
            ));
        }
        if self.ran_backward {
            return contract_err("backward already ran on this tape".to_string());
        }
        self.ran_backward = true;
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss.0] = Some(Tensor4::filled(self.vals[loss.0].dims(), 1.0));

        for i in (0..=loss.0).rev() {
            if self.grads[i].is_none() || matches!(self.ops[i], Op::Leaf) {
                continue;
            }
            let g = self.grads[i].take().unwrap();
            // hold a borrow-free copy of the op description
            let op = &self.ops[i];
            match op {
                Op::Leaf => unreachable!(),
                Op::Conv2d {
                    x,
                    w,
                    bias,
                    stride,
                    pad,
                } => {
                    let (x, w, bias, stride, pad) = (*x, *w, *bias, *stride, *pad);
                    if self.requires[x.0] {
                        let gx = kernels::conv2d_bwd_input(
                            &g,
                            &self.vals[w.0],
                            stride,
                            Pad2::uniform(pad),
                            self.vals[x.0].dims(),
                        )?;
                        self.accumulate(x, gx);
                    }
                    if self.requires[w.0] || bias.map(|b| self.requires[b.0]).unwrap_or(false) {
                        let (gw, gb) = kernels::conv2d_bwd_weight(
                            &self.vals[x.0],
                            &g,
                            stride,
                            Pad2::uniform(pad),
                            0.0,
                            self.vals[w.0].dims(),
                            bias.is_some(),
                        )?;
                        if self.requires[w.0] {
                            self.accumulate(w, gw);
                        }
                        if let (Some(b), Some(gb)) = (bias, gb) {
                            if self.requires[b.0] {
                                let bd = self.vals[b.0].dims();
                                self.accumulate(b, Tensor4::from_vec(bd, gb)?);
                            }
                        }
                    }
                    self.grads[i] = Some(g);
                }
                Op::BinConv {
                    x,
                    w,
                    stride,
                    pad,
                    scale,
                } => {
                    let (x, w, stride, pad, scale) = (*x, *w, *stride, *pad, *scale);
                    let x_pm1 = self.vals[x.0].map(|v| if v >= 0.0 { 1.0 } else { -1.0 });
                    let w_pm1 = self.vals[w.0].map(|v| if v >= 0.0 { 1.0 } else { -1.0 });
                    if self.requires[x.0] {
                        let gxb = kernels::conv2d_bwd_input(
                            &g,
                            &w_pm1,
                            stride,
                            Pad2::uniform(pad),
                            self.vals[x.0].dims(),
                        )?
                        .scaled(scale);
                        let gx = ste_backward(&gxb, &self.vals[x.0])?;
                        self.accumulate(x, gx);
                    }
                    if self.requires[w.0] {
                        let (gws, _) = kernels::conv2d_bwd_weight(
                            &x_pm1,
                            &g,
                            stride,
                            Pad2::uniform(pad),
                            -1.0,
                            self.vals[w.0].dims(),
                            false,
                        )?;
                        let gw = ste_backward(&gws.scaled(scale), &self.vals[w.0])?;
                        self.accumulate(w, gw);
                    }
                    self.grads[i] = Some(g);
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.requires[a.0] {
                        self.accumulate(a, g.clone());
                    }
                    if self.requires[b.0] {
                        self.accumulate(b, g.clone());
                    }
                    self.grads[i] = Some(g);
                }
                Op::AddBcast { x, b } => {
                    let (x, b) = (*x, *b);
                    if self.requires[x.0] {
                        self.accumulate(x, g.clone());
                    }
                    if self.requires[b.0] {
                        let gb = kernels::reduce_to_dims(&g, self.vals[b.0].dims());
                        self.accumulate(b, gb);
                    }
                    self.grads[i] = Some(g);
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.requires[a.0] {
                        let ga = kernels::mul(&g, &self.vals[b.0])?;
                        self.accumulate(a, ga);
                    }
                    if self.requires[b.0] {
                        let gb = kernels::mul(&g, &self.vals[a.0])?;
                        self.accumulate(b, gb);
                    }
                    self.grads[i] = Some(g);
                }
                Op::Scale { x, factor } => {
                    let (x, factor) = (*x, *factor);
                    if self.requires[x.0] {
                        self.accumulate(x, g.scaled(factor));
                    }
                    self.grads[i] = Some(g);
                }
                Op::Rprelu {
                    x,
                    gamma,
                    zeta,
                    beta,
                } => {
                    let (x, gamma, zeta, beta) = (*x, *gamma, *zeta, *beta);
                    let (gx, gg, gz, gb) = kernels::rprelu_bwd(
                        &self.vals[x.0],
                        &self.vals[gamma.0],
                        &self.vals[beta.0],
                        &g,
                    );
                    if self.requires[x.0] {
                        self.accumulate(x, gx);
                    }
                    if self.requires[gamma.0] {
                        self.accumulate(gamma, gg);
                    }
                    if self.requires[zeta.0] {
                        self.accumulate(zeta, gz);
                    }
                    if self.requires[beta.0] {
                        self.accumulate(beta, gb);
                    }
                    self.grads[i] = Some(g);
                }
                Op::Silu(x) => {
                    let x = *x;
                    if self.requires[x.0] {
                        let gx = kernels::silu_bwd(&self.vals[x.0], &g);
                        self.accumulate(x, gx);
                    }
                    self.grads[i] = Some(g);
                }
                Op::PixelShuffle { x, r } => {
                    let (x, r) = (*x, *r);
                    if self.requires[x.0] {
                        self.accumulate(x, kernels::pixel_unshuffle(&g, r)?);
                    }
                    self.grads[i] = Some(g);
                }
                Op::PixelUnshuffle { x, r } => {
                    let (x, r) = (*x, *r);
                    if self.requires[x.0] {
                        self.accumulate(x, kernels::pixel_shuffle(&g, r)?);
                    }
                    self.grads[i] = Some(g);
                }
                Op::ConcatC(a, b) => {
                    let (a, b) = (*a, *b);
                    let ca = self.vals[a.0].dims().c;
                    let cb = self.vals[b.0].dims().c;
                    if self.requires[a.0] {
                        let ga = kernels::gather_c(&g, &(0..ca).collect::<Vec<_>>())?;
                        self.accumulate(a, ga);
                    }
                    if self.requires[b.0] {
                        let gb = kernels::gather_c(&g, &(ca..ca + cb).collect::<Vec<_>>())?;
                        self.accumulate(b, gb);
                    }
                    self.grads[i] = Some(g);
                }
                Op::GatherC { x, idx } => {
                    let x = *x;
                    let idx = idx.clone();
                    if self.requires[x.0] {
                        let gx = kernels::gather_c_bwd(&g, &idx, self.vals[x.0].dims());
                        self.accumulate(x, gx);
                    }
                    self.grads[i] = Some(g);
                }
                Op::SumAll(x) => {
                    let x = *x;
                    if self.requires[x.0] {
                        let up = g.data()[0];
                        self.accumulate(x, Tensor4::filled(self.vals[x.0].dims(), up));
                    }
                    self.grads[i] = Some(g);
                }
                Op::MeanAll(x) => {
                    let x = *x;
                    if self.requires[x.0] {
                        let up = g.data()[0] / self.vals[x.0].len() as f32;
                        self.accumulate(x, Tensor4::filled(self.vals[x.0].dims(), up));
                    }
                    self.grads[i] = Some(g);
                }
                Op::L1(a, b) => {
                    let (a, b) = (*a, *b);
                    let (ga, gb) =
                        kernels::l1_bwd(&self.vals[a.0], &self.vals[b.0], g.data()[0]);
                    if self.requires[a.0] {
                        self.accumulate(a, ga);
                    }
                    if self.requires[b.0] {
                        self.accumulate(b, gb);
                    }
                    self.grads[i] = Some(g);
                }
            }
        }
        Ok(())
    }

    // Reduction and loss ops only the training path needs.

    pub fn sum_all(&mut self, x: TensorId) -> Result<TensorId> {
        let s = kernels::sum_all(&self.vals[x.0]);
        self.push(Tensor4::scalar(s), Op::SumAll(x), "sum_all")
    }

    pub fn mean_all(&mut self, x: TensorId) -> Result<TensorId> {
        let s = kernels::mean_all(&self.vals[x.0]);
        self.push(Tensor4::scalar(s), Op::MeanAll(x), "mean_all")
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let t = kernels::mul(&self.vals[a.0], &self.vals[b.0])?;
        self.push(t, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, x: TensorId, factor: f32) -> Result<TensorId> {
        let t = self.vals[x.0].scaled(factor);
        self.push(t, Op::Scale { x, factor }, "scale")
    }

    /// Mean absolute difference as a taped scalar.
    pub fn l1_loss(&mut self, pred: TensorId, target: TensorId) -> Result<TensorId> {
        let l = kernels::l1_fwd(&self.vals[pred.0], &self.vals[target.0])?;
        self.push(Tensor4::scalar(l), Op::L1(pred, target), "l1_loss")
    }

    /// Structural view of the recorded graph for invariant checks: for node
    /// `i`, which input value ids feed it through full-precision-transparent
    /// edges (adds, concat/gather permutations, pixel shuffles).
    pub fn transparent_inputs(&self, id: TensorId) -> Vec<TensorId> {
        match &self.ops[id.0] {
            Op::Add(a, b) | Op::ConcatC(a, b) => vec![*a, *b],
            Op::AddBcast { x, b } => vec![*x, *b],
            Op::PixelShuffle { x, .. } | Op::PixelUnshuffle { x, .. } | Op::GatherC { x, .. } => {
                vec![*x]
            }
            _ => vec![],
        }
    }

    /// True when a path of transparent edges connects `from` to `to`.
    pub fn has_transparent_path(&self, from: TensorId, to: TensorId) -> bool {
        let mut reached = vec![false; self.vals.len()];
        reached[from.0] = true;
        for i in from.0 + 1..=to.0 {
            if self.transparent_inputs(TensorId(i)).iter().any(|p| reached[p.0]) {
                reached[i] = true;
            }
        }
        reached[to.0]
    }
}

impl Engine for TapeEngine {
    type Val = TensorId;

    fn constant(&mut self, t: Tensor4) -> Result<TensorId> {
        self.leaf(t, false)
    }

    fn dims(&self, v: &TensorId) -> Dims {
        self.vals[v.0].dims()
    }

    fn conv2d(
        &mut self,
        x: &TensorId,
        w: &Param,
        bias: Option<&Param>,
        stride: usize,
        pad: usize,
    ) -> Result<TensorId> {
        let wid = self.param_leaf(w)?;
        let bid = bias.map(|b| self.param_leaf(b)).transpose()?;
        let out = kernels::conv2d_fwd(
            &self.vals[x.0],
            &self.vals[wid.0],
            bid.map(|b| self.vals[b.0].data()),
            stride,
            Pad2::uniform(pad),
            0.0,
        )?;
        self.push(
            out,
            Op::Conv2d {
                x: *x,
                w: wid,
                bias: bid,
                stride,
                pad,
            },
            "conv2d",
        )
    }

    fn binconv2d(&mut self, x_r: &TensorId, w: &Param, stride: usize, pad: usize) -> Result<TensorId> {
        let wid = self.param_leaf(w)?;
        let sb = binarize_weights(&self.vals[wid.0])?;
        // dense +-1 conv; bit-identical to the packed kernel (tested)
        let x_pm1 = self.vals[x_r.0].map(|v| if v >= 0.0 { 1.0 } else { -1.0 });
        let w_pm1 = sb.bits.unpack();
        let out = kernels::conv2d_fwd(&x_pm1, &w_pm1, None, stride, Pad2::uniform(pad), -1.0)?
            .scaled(sb.scale);
        self.push(
            out,
            Op::BinConv {
                x: *x_r,
                w: wid,
                stride,
                pad,
                scale: sb.scale,
            },
            "binconv2d",
        )
    }

    fn add(&mut self, a: &TensorId, b: &TensorId) -> Result<TensorId> {
        let t = kernels::add(&self.vals[a.0], &self.vals[b.0])?;
        self.push(t, Op::Add(*a, *b), "add")
    }

    fn add_param_bcast(&mut self, x: &TensorId, p: &Param) -> Result<TensorId> {
        let bid = self.param_leaf(p)?;
        let t = kernels::add_bcast(&self.vals[x.0], &self.vals[bid.0])?;
        self.push(t, Op::AddBcast { x: *x, b: bid }, "add_param_bcast")
    }

    fn add_bcast(&mut self, x: &TensorId, b: &TensorId) -> Result<TensorId> {
        let t = kernels::add_bcast(&self.vals[x.0], &self.vals[b.0])?;
        self.push(t, Op::AddBcast { x: *x, b: *b }, "add_bcast")
    }

    fn rprelu(
        &mut self,
        x: &TensorId,
        gamma: &Param,
        zeta: &Param,
        beta: &Param,
    ) -> Result<TensorId> {
        let gid = self.param_leaf(gamma)?;
        let zid = self.param_leaf(zeta)?;
        let bid = self.param_leaf(beta)?;
        let t = kernels::rprelu_fwd(
            &self.vals[x.0],
            &self.vals[gid.0],
            &self.vals[zid.0],
            &self.vals[bid.0],
        )?;
        self.push(
            t,
            Op::Rprelu {
                x: *x,
                gamma: gid,
                zeta: zid,
                beta: bid,
            },
            "rprelu",
        )
    }

    fn silu(&mut self, x: &TensorId) -> Result<TensorId> {
        let t = kernels::silu_fwd(&self.vals[x.0]);
        self.push(t, Op::Silu(*x), "silu")
    }

    fn pixel_shuffle(&mut self, x: &TensorId, r: usize) -> Result<TensorId> {
        let t = kernels::pixel_shuffle(&self.vals[x.0], r)?;
        self.push(t, Op::PixelShuffle { x: *x, r }, "pixel_shuffle")
    }

    fn pixel_unshuffle(&mut self, x: &TensorId, r: usize) -> Result<TensorId> {
        let t = kernels::pixel_unshuffle(&self.vals[x.0], r)?;
        self.push(t, Op::PixelUnshuffle { x: *x, r }, "pixel_unshuffle")
    }

    fn concat_c(&mut self, a: &TensorId, b: &TensorId) -> Result<TensorId> {
        let t = kernels::concat_c(&self.vals[a.0], &self.vals[b.0])?;
        self.push(t, Op::ConcatC(*a, *b), "concat_c")
    }

    fn gather_c(&mut self, x: &TensorId, idx: &[usize]) -> Result<TensorId> {
        let t = kernels::gather_c(&self.vals[x.0], idx)?;
        self.push(
            t,
            Op::GatherC {
                x: *x,
                idx: idx.to_vec(),
            },
            "gather_c",
        )
    }
}
