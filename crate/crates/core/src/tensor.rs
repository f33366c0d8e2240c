//! Dense rank-4 tensor in NCHW layout, f32, row-major.
//!
//! This is the only activation/weight container in the dense path. Ops that
//! produce tensors check their outputs for non-finite values in debug builds.

use crate::error::{shape_err, Error, Result};

/// (batch, channels, height, width) dimensions of a [`Tensor4`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Dims { n, c, h, w }
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{},{},{})", self.n, self.c, self.h, self.w)
    }
}

/// Dense NCHW f32 tensor. Immutable once an op has produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    data: Vec<f32>,
    dims: Dims,
}

impl Tensor4 {
    pub fn zeros(dims: Dims) -> Self {
        Tensor4 {
            data: vec![0.0; dims.len()],
            dims,
        }
    }

    pub fn filled(dims: Dims, v: f32) -> Self {
        Tensor4 {
            data: vec![v; dims.len()],
            dims,
        }
    }

    pub fn from_vec(dims: Dims, data: Vec<f32>) -> Result<Self> {
        if data.len() != dims.len() {
            return shape_err(format!(
                "data length {} does not match dims {} ({} elements)",
                data.len(),
                dims,
                dims.len()
            ));
        }
        Ok(Tensor4 { data, dims })
    }

    /// Scalar wrapped as a 1x1x1x1 tensor.
    pub fn scalar(v: f32) -> Self {
        Tensor4 {
            data: vec![v],
            dims: Dims::new(1, 1, 1, 1),
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.dims.c + c) * self.dims.h + y) * self.dims.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(n, c, y, x)]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, y: usize, x: usize) -> &mut f32 {
        let i = self.index(n, c, y, x);
        &mut self.data[i]
    }

    /// Slice holding one (n, c) plane of h*w values.
    pub fn plane(&self, n: usize, c: usize) -> &[f32] {
        let hw = self.dims.h * self.dims.w;
        let start = (n * self.dims.c + c) * hw;
        &self.data[start..start + hw]
    }

    pub fn same_dims(&self, other: &Tensor4) -> Result<()> {
        if self.dims != other.dims {
            return shape_err(format!("dims {} vs {}", self.dims, other.dims));
        }
        Ok(())
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Debug-build guard against NaN/Inf escaping a forward op.
    pub fn check_finite(&self, what: &str) -> Result<()> {
        if cfg!(debug_assertions) && !self.is_all_finite() {
            return Err(Error::Numeric(format!("non-finite value in {what}")));
        }
        Ok(())
    }

    pub fn scaled(&self, s: f32) -> Tensor4 {
        Tensor4 {
            data: self.data.iter().map(|v| v * s).collect(),
            dims: self.dims,
        }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor4 {
        Tensor4 {
            data: self.data.iter().map(|&v| f(v)).collect(),
            dims: self.dims,
        }
    }
}
