//! 1-bit primitives: sign binarization, bit packing, weight binarization
//! with mean-absolute scaling, the XNOR-popcount convolution kernel, and the
//! straight-through estimator used to train through the sign function.
//!
//! Bit conventions (fixed, on-disk and in-memory):
//!   - bit 1 encodes +1, bit 0 encodes -1
//!   - packing order is row-major NCHW, LSB-first within each 64-bit word
//!   - trailing pad bits in the last word are zero
//!   - padding in the spatial domain is the logical value -1 (bit 0)

use crate::error::{contract_err, shape_err, Result};
use crate::kernels::conv::{conv_output_dims, Pad2};
use crate::tensor::{Dims, Tensor4};
use rayon::prelude::*;

/// Bit-packed +-1 tensor, one bit per element.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedBits {
    words: Vec<u64>,
    logical_len: usize,
    dims: Dims,
}

impl PackedBits {
    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn logical_len(&self) -> usize {
        self.logical_len
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    #[inline]
    pub fn bit(&self, i: usize) -> bool {
        (self.words[i / 64] >> (i % 64)) & 1 == 1
    }

    /// Expand back to a +-1 float tensor.
    pub fn unpack(&self) -> Tensor4 {
        let data = (0..self.logical_len)
            .map(|i| if self.bit(i) { 1.0 } else { -1.0 })
            .collect();
        Tensor4::from_vec(self.dims, data).expect("logical_len matches dims")
    }

    fn from_pred(dims: Dims, mut pred: impl FnMut(usize) -> bool) -> Self {
        let len = dims.len();
        let mut words = vec![0u64; len.div_ceil(64)];
        for i in 0..len {
            if pred(i) {
                words[i / 64] |= 1u64 << (i % 64);
            }
        }
        PackedBits {
            words,
            logical_len: len,
            dims,
        }
    }
}

/// Binarize with the sign convention `x >= 0 -> +1` (IEEE -0.0 compares >= 0).
pub fn sign_binarize(x: &Tensor4) -> Result<PackedBits> {
    x.check_finite("sign_binarize input")?;
    let data = x.data();
    Ok(PackedBits::from_pred(x.dims(), |i| data[i] >= 0.0))
}

/// Pack a tensor that already holds exact +-1 values.
pub fn pack(x: &Tensor4) -> Result<PackedBits> {
    if let Some(v) = x.data().iter().find(|v| v.abs() != 1.0) {
        return contract_err(format!("pack expects +-1 values, found {v}"));
    }
    let data = x.data();
    Ok(PackedBits::from_pred(x.dims(), |i| data[i] > 0.0))
}

/// Per-layer binarized weight: packed signs plus one scalar scale equal to
/// the mean absolute value of the latent weights.
#[derive(Debug, Clone)]
pub struct ScaledBinaryWeight {
    pub bits: PackedBits,
    pub scale: f32,
}

impl ScaledBinaryWeight {
    /// scale * sign(w) as a dense tensor.
    pub fn reconstruct(&self) -> Tensor4 {
        self.bits.unpack().scaled(self.scale)
    }
}

/// Binarize a latent weight tensor: signs with the >= 0 convention, scale
/// `sum(|w|)/n` over the whole tensor.
pub fn binarize_weights(w_latent: &Tensor4) -> Result<ScaledBinaryWeight> {
    if w_latent.is_empty() {
        return contract_err("cannot binarize an empty weight tensor".to_string());
    }
    w_latent.check_finite("binarize_weights input")?;
    let n = w_latent.len() as f64;
    let scale = (w_latent.data().iter().map(|v| v.abs() as f64).sum::<f64>() / n) as f32;
    Ok(ScaledBinaryWeight {
        bits: sign_binarize(w_latent)?,
        scale,
    })
}

/// Clipped-identity straight-through estimator: pass the upstream gradient
/// where |input| <= 1 (inclusive), zero elsewhere.
pub fn ste_backward(upstream: &Tensor4, pre_binarization_input: &Tensor4) -> Result<Tensor4> {
    upstream.same_dims(pre_binarization_input)?;
    let data = upstream
        .data()
        .iter()
        .zip(pre_binarization_input.data())
        .map(|(&g, &x)| if x.abs() <= 1.0 { g } else { 0.0 })
        .collect();
    Tensor4::from_vec(upstream.dims(), data)
}

/// One weight row of kw bits, LSB-first, for fast window XNOR.
fn weight_rows(w: &PackedBits) -> Vec<u64> {
    let d = w.dims();
    let kw = d.w;
    let mut rows = vec![0u64; d.n * d.c * d.h];
    for (r, row) in rows.iter_mut().enumerate() {
        let base = r * kw;
        for kx in 0..kw {
            if w.bit(base + kx) {
                *row |= 1u64 << kx;
            }
        }
    }
    rows
}

/// XNOR-popcount convolution over packed +-1 activations and weights.
///
/// Each output value is `scale * (2 * agreements - window)` where `window`
/// is the full c_in*kh*kw tap count; spatial taps outside the image read -1.
/// This is bit-exact against a float conv over the unpacked tensors with
/// -1 padding, multiplied by `scale` last.
pub fn xnor_conv2d(
    x: &PackedBits,
    w: &ScaledBinaryWeight,
    stride: usize,
    pad: usize,
) -> Result<Tensor4> {
    let xd = x.dims();
    let wd = w.bits.dims();
    let od = conv_output_dims(xd, wd, stride, Pad2::uniform(pad))?;
    let (kh, kw) = (wd.h, wd.w);
    if kw > 64 {
        return shape_err(format!("kernel width {kw} exceeds the 64-bit row limit"));
    }
    let window = (wd.c * kh * kw) as i32;
    let mask: u64 = if kw == 64 { u64::MAX } else { (1u64 << kw) - 1 };
    let wrows = weight_rows(&w.bits);
    let scale = w.scale;
    let mut out = Tensor4::zeros(od);
    let (oh, ow) = (od.h, od.w);
    let ohw = oh * ow;
    let row_bits = xd.w;

    let planes: Vec<(usize, usize)> = (0..od.n)
        .flat_map(|n| (0..od.c).map(move |co| (n, co)))
        .collect();
    let results: Vec<Vec<f32>> = planes
        .par_iter()
        .map(|&(n, co)| {
            let mut plane = vec![0.0f32; ohw];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut agree: i32 = 0;
                    for ci in 0..xd.c {
                        for ky in 0..kh {
                            let wrow = wrows[(co * wd.c + ci) * kh + ky];
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= xd.h as isize {
                                // whole row is padding (-1 = bit 0): agreements
                                // where the weight bit is 0 too
                                agree += kw as i32 - wrow.count_ones() as i32;
                                continue;
                            }
                            let x0 = (ox * stride) as isize - pad as isize;
                            let start = ((n * xd.c + ci) * xd.h + iy as usize) * row_bits;
                            let xbits = extract_bits(&x.words, start, row_bits, x0, kw);
                            agree += (!(xbits ^ wrow) & mask).count_ones() as i32;
                        }
                    }
                    plane[oy * ow + ox] = scale * (2 * agree - window) as f32;
                }
            }
            plane
        })
        .collect();
    for ((n, co), plane) in planes.into_iter().zip(results) {
        let base = (n * od.c + co) * ohw;
        out.data_mut()[base..base + ohw].copy_from_slice(&plane);
    }
    Ok(out)
}

/// Read `count` bits of a logical row (row starts at absolute bit `start`,
/// holds `row_len` bits) beginning at column `x0`; columns outside [0,row_len)
/// read 0. Result is LSB-first.
#[inline]
fn extract_bits(words: &[u64], start: usize, row_len: usize, x0: isize, count: usize) -> u64 {
    debug_assert!(count <= 64);
    let lo = x0.max(0) as usize;
    let hi = ((x0 + count as isize).min(row_len as isize)).max(0) as usize;
    if lo >= hi {
        return 0;
    }
    let abs = start + lo;
    let word = abs / 64;
    let shift = abs % 64;
    let span = hi - lo;
    let mut bits = words[word] >> shift;
    if shift + span > 64 && word + 1 < words.len() {
        bits |= words[word + 1] << (64 - shift);
    }
    if span < 64 {
        bits &= (1u64 << span) - 1;
    }
    // place at the window-relative position (lo - x0)
    bits << (lo as isize - x0) as usize
}
