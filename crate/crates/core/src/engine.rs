//! Execution engines. The network forward code is written once against the
//! [`Engine`] trait and interpreted three ways: reverse-mode autodiff for
//! training ([`crate::tape::TapeEngine`]), eager evaluation for inference
//! ([`EagerEngine`]), and shape-only cost accounting
//! ([`crate::cost::CostEngine`]).

use std::sync::Arc;

use crate::bits::{binarize_weights, sign_binarize, xnor_conv2d};
use crate::error::Result;
use crate::kernels::{self, conv::Pad2};
use crate::tensor::{Dims, Tensor4};

/// Stable identity of a learnable parameter, assigned at network build time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// A learnable tensor. `binarized` marks latent weights that are sign+scale
/// quantized on every forward pass; those count at 1/32 in the params report.
#[derive(Debug, Clone)]
pub struct Param {
    pub id: ParamId,
    pub name: String,
    pub value: Arc<Tensor4>,
    pub binarized: bool,
}

impl Param {
    pub fn tensor(&self) -> &Tensor4 {
        &self.value
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor4 {
        Arc::make_mut(&mut self.value)
    }
}

/// Hands out sequential [`ParamId`]s while a network is being assembled.
#[derive(Debug, Default)]
pub struct ParamBuilder {
    next: usize,
}

impl ParamBuilder {
    pub fn new() -> Self {
        ParamBuilder { next: 0 }
    }

    pub fn param(&mut self, name: impl Into<String>, value: Tensor4, binarized: bool) -> Param {
        let id = ParamId(self.next);
        self.next += 1;
        Param {
            id,
            name: name.into(),
            value: Arc::new(value),
            binarized,
        }
    }

    pub fn count(&self) -> usize {
        self.next
    }
}

/// The fixed op set the network is built from.
pub trait Engine {
    type Val: Clone;

    /// Wrap a plain tensor (no gradient).
    fn constant(&mut self, t: Tensor4) -> Result<Self::Val>;
    fn dims(&self, v: &Self::Val) -> Dims;

    /// Dense full-precision convolution with optional bias, zero padding.
    fn conv2d(
        &mut self,
        x: &Self::Val,
        w: &Param,
        bias: Option<&Param>,
        stride: usize,
        pad: usize,
    ) -> Result<Self::Val>;

    /// Binarized convolution: sign(x_r) convolved with sign(w)*scale where
    /// scale is the mean absolute latent weight. Spatial padding is -1.
    /// Backward (where applicable) is the clipped straight-through estimator
    /// to both the activation and the latent weight; the scale is treated as
    /// a constant.
    fn binconv2d(&mut self, x_r: &Self::Val, w: &Param, stride: usize, pad: usize)
        -> Result<Self::Val>;

    fn add(&mut self, a: &Self::Val, b: &Self::Val) -> Result<Self::Val>;
    /// x + p with p broadcast over batch and spatial dims (per-channel bias).
    fn add_param_bcast(&mut self, x: &Self::Val, p: &Param) -> Result<Self::Val>;
    /// x + b with b broadcast over singleton axes (timestep injection).
    fn add_bcast(&mut self, x: &Self::Val, b: &Self::Val) -> Result<Self::Val>;
    fn rprelu(
        &mut self,
        x: &Self::Val,
        gamma: &Param,
        zeta: &Param,
        beta: &Param,
    ) -> Result<Self::Val>;
    fn silu(&mut self, x: &Self::Val) -> Result<Self::Val>;
    fn pixel_shuffle(&mut self, x: &Self::Val, r: usize) -> Result<Self::Val>;
    fn pixel_unshuffle(&mut self, x: &Self::Val, r: usize) -> Result<Self::Val>;
    fn concat_c(&mut self, a: &Self::Val, b: &Self::Val) -> Result<Self::Val>;
    fn gather_c(&mut self, x: &Self::Val, idx: &[usize]) -> Result<Self::Val>;

    /// Hook for activation taps (histogram dumps); default is a no-op.
    fn observe(&mut self, _name: &str, _v: &Self::Val) {}
}

/// How the eager engine executes binarized convolutions. Both paths produce
/// bit-identical outputs; `Bits` runs the packed XNOR-popcount kernel,
/// `Dense` runs the float kernel over unpacked +-1 tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BinExec {
    #[default]
    Bits,
    Dense,
}

/// Immediate evaluation; intermediates free as soon as the last handle drops.
pub struct EagerEngine {
    pub bin_exec: BinExec,
    observe_layer: Option<String>,
    observations: Vec<Tensor4>,
}

impl EagerEngine {
    pub fn new(bin_exec: BinExec) -> Self {
        EagerEngine {
            bin_exec,
            observe_layer: None,
            observations: Vec::new(),
        }
    }

    /// Capture every activation observed under `name` (see [`Engine::observe`]).
    pub fn watch(&mut self, name: &str) {
        self.observe_layer = Some(name.to_string());
    }

    pub fn take_observations(&mut self) -> Vec<Tensor4> {
        std::mem::take(&mut self.observations)
    }

    fn wrap(&self, t: Tensor4, what: &str) -> Result<Arc<Tensor4>> {
        t.check_finite(what)?;
        Ok(Arc::new(t))
    }
}

impl Engine for EagerEngine {
    type Val = Arc<Tensor4>;

    fn constant(&mut self, t: Tensor4) -> Result<Self::Val> {
        self.wrap(t, "constant")
    }

    fn dims(&self, v: &Self::Val) -> Dims {
        v.dims()
    }

    fn conv2d(
        &mut self,
        x: &Self::Val,
        w: &Param,
        bias: Option<&Param>,
        stride: usize,
        pad: usize,
    ) -> Result<Self::Val> {
        let b = bias.map(|p| p.value.data());
        let out = kernels::conv2d_fwd(x, w.tensor(), b, stride, Pad2::uniform(pad), 0.0)?;
        self.wrap(out, "conv2d")
    }

    fn binconv2d(
        &mut self,
        x_r: &Self::Val,
        w: &Param,
        stride: usize,
        pad: usize,
    ) -> Result<Self::Val> {
        let sb = binarize_weights(w.tensor())?;
        let out = match self.bin_exec {
            BinExec::Bits => {
                let xb = sign_binarize(x_r)?;
                xnor_conv2d(&xb, &sb, stride, pad)?
            }
            BinExec::Dense => {
                let x_pm1 = x_r.map(|v| if v >= 0.0 { 1.0 } else { -1.0 });
                let w_pm1 = sb.bits.unpack();
                kernels::conv2d_fwd(&x_pm1, &w_pm1, None, stride, Pad2::uniform(pad), -1.0)?
                    .scaled(sb.scale)
            }
        };
        self.wrap(out, "binconv2d")
    }

    fn add(&mut self, a: &Self::Val, b: &Self::Val) -> Result<Self::Val> {
        self.wrap(kernels::add(a, b)?, "add")
    }

    fn add_param_bcast(&mut self, x: &Self::Val, p: &Param) -> Result<Self::Val> {
        self.wrap(kernels::add_bcast(x, p.tensor())?, "add_param_bcast")
    }

    fn add_bcast(&mut self, x: &Self::Val, b: &Self::Val) -> Result<Self::Val> {
        self.wrap(kernels::add_bcast(x, b)?, "add_bcast")
    }

    fn rprelu(
        &mut self,
        x: &Self::Val,
        gamma: &Param,
        zeta: &Param,
        beta: &Param,
    ) -> Result<Self::Val> {
        let out = kernels::rprelu_fwd(x, gamma.tensor(), zeta.tensor(), beta.tensor())?;
        self.wrap(out, "rprelu")
    }

    fn silu(&mut self, x: &Self::Val) -> Result<Self::Val> {
        self.wrap(kernels::silu_fwd(x), "silu")
    }

    fn pixel_shuffle(&mut self, x: &Self::Val, r: usize) -> Result<Self::Val> {
        self.wrap(kernels::pixel_shuffle(x, r)?, "pixel_shuffle")
    }

    fn pixel_unshuffle(&mut self, x: &Self::Val, r: usize) -> Result<Self::Val> {
        self.wrap(kernels::pixel_unshuffle(x, r)?, "pixel_unshuffle")
    }

    fn concat_c(&mut self, a: &Self::Val, b: &Self::Val) -> Result<Self::Val> {
        self.wrap(kernels::concat_c(a, b)?, "concat_c")
    }

    fn gather_c(&mut self, x: &Self::Val, idx: &[usize]) -> Result<Self::Val> {
        self.wrap(kernels::gather_c(x, idx)?, "gather_c")
    }

    fn observe(&mut self, name: &str, v: &Self::Val) {
        if self.observe_layer.as_deref() == Some(name) {
            self.observations.push((**v).clone());
        }
    }
}
