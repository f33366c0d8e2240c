//! Dense 2-D cross-correlation and its reverse-mode adjoints.
//!
//! Forward and weight-gradient run as im2col + sgemm over row chunks; the
//! input gradient is rewritten as a forward conv over the dilated upstream
//! gradient with a flipped kernel, so all three paths share one engine.
//!
//! `pad_value` exists because the binary path pads with -1 (logical bit 0)
//! while the dense path pads with 0.

use matrixmultiply::sgemm;
use rayon::prelude::*;

use crate::error::{shape_err, Result};
use crate::tensor::{Dims, Tensor4};

/// Asymmetric padding; negative values crop.
#[derive(Debug, Clone, Copy)]
pub struct Pad2 {
    pub top: isize,
    pub bottom: isize,
    pub left: isize,
    pub right: isize,
}

impl Pad2 {
    pub fn uniform(p: usize) -> Self {
        let p = p as isize;
        Pad2 {
            top: p,
            bottom: p,
            left: p,
            right: p,
        }
    }
}

pub fn conv_out_len(input: usize, k: usize, pad_lo: isize, pad_hi: isize, stride: usize) -> Result<usize> {
    let span = input as isize + pad_lo + pad_hi - k as isize;
    if span < 0 {
        return shape_err(format!(
            "kernel {k} does not fit input {input} with pads ({pad_lo},{pad_hi})"
        ));
    }
    Ok(span as usize / stride + 1)
}

/// Output dims for a conv of `x_dims` with weight `w_dims` = (c_out, c_in, kh, kw).
pub fn conv_output_dims(x: Dims, w: Dims, stride: usize, pad: Pad2) -> Result<Dims> {
    if x.c != w.c {
        return shape_err(format!(
            "conv input has {} channels, weight expects {}",
            x.c, w.c
        ));
    }
    if stride == 0 {
        return shape_err("stride must be >= 1".to_string());
    }
    let oh = conv_out_len(x.h, w.h, pad.top, pad.bottom, stride)?;
    let ow = conv_out_len(x.w, w.w, pad.left, pad.right, stride)?;
    Ok(Dims::new(x.n, w.n, oh, ow))
}

/// Fill `cols` (k_total x rows*ow, row-major) with the im2col patch matrix
/// for output rows [oy0, oy0+rows) of image `n`.
#[allow(clippy::too_many_arguments)]
fn im2col_rows(
    x: &Tensor4,
    n: usize,
    oy0: usize,
    rows: usize,
    ow: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: Pad2,
    pad_value: f32,
    cols: &mut [f32],
) {
    let d = x.dims();
    let (h, w) = (d.h as isize, d.w as isize);
    let width = rows * ow;
    for ci in 0..d.c {
        let plane = x.plane(n, ci);
        for ky in 0..kh {
            for kx in 0..kw {
                let row_idx = (ci * kh + ky) * kw + kx;
                let dst_row = &mut cols[row_idx * width..(row_idx + 1) * width];
                for r in 0..rows {
                    let oy = oy0 + r;
                    let iy = (oy * stride) as isize - pad.top + ky as isize;
                    let dst = &mut dst_row[r * ow..(r + 1) * ow];
                    if iy < 0 || iy >= h {
                        dst.fill(pad_value);
                        continue;
                    }
                    let src = &plane[(iy as usize) * d.w..(iy as usize + 1) * d.w];
                    if stride == 1 {
                        // ix = ox - pad.left + kx; valid ox range is a single run
                        let shift = kx as isize - pad.left;
                        let ox_lo = (-shift).clamp(0, ow as isize) as usize;
                        let ox_hi = (w - shift).clamp(0, ow as isize) as usize;
                        dst[..ox_lo].fill(pad_value);
                        dst[ox_hi..].fill(pad_value);
                        if ox_hi > ox_lo {
                            let src_lo = (ox_lo as isize + shift) as usize;
                            dst[ox_lo..ox_hi]
                                .copy_from_slice(&src[src_lo..src_lo + (ox_hi - ox_lo)]);
                        }
                    } else {
                        for (ox, out) in dst.iter_mut().enumerate() {
                            let ix = (ox * stride) as isize - pad.left + kx as isize;
                            *out = if ix < 0 || ix >= w {
                                pad_value
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Pick a row-chunk size that keeps the im2col buffer around 2 MiB.
fn chunk_rows(k_total: usize, ow: usize, oh: usize) -> usize {
    let budget = 512 * 1024; // f32 elements
    (budget / (k_total * ow).max(1)).clamp(1, oh)
}

/// Cross-correlation forward. `w` is (c_out, c_in, kh, kw); `bias` is per
/// output channel. Out-of-bounds taps read `pad_value`.
pub fn conv2d_fwd(
    x: &Tensor4,
    w: &Tensor4,
    bias: Option<&[f32]>,
    stride: usize,
    pad: Pad2,
    pad_value: f32,
) -> Result<Tensor4> {
    let xd = x.dims();
    let wd = w.dims();
    let od = conv_output_dims(xd, wd, stride, pad)?;
    if let Some(b) = bias {
        if b.len() != wd.n {
            return shape_err(format!("bias length {} != c_out {}", b.len(), wd.n));
        }
    }
    let (co, kh, kw) = (wd.n, wd.h, wd.w);
    let k_total = wd.c * kh * kw;
    let (oh, ow) = (od.h, od.w);
    let ohw = oh * ow;
    let mut out = Tensor4::zeros(od);
    let rows_per_chunk = chunk_rows(k_total, ow, oh);

    for n in 0..xd.n {
        let out_image =
            &mut out.data_mut()[n * co * ohw..(n + 1) * co * ohw];
        let mut oy0 = 0;
        let mut cols = vec![0.0f32; k_total * rows_per_chunk * ow];
        while oy0 < oh {
            let rows = rows_per_chunk.min(oh - oy0);
            let width = rows * ow;
            im2col_rows(x, n, oy0, rows, ow, kh, kw, stride, pad, pad_value, &mut cols);
            // Split output channels across threads; each slice is contiguous.
            let blocks: Vec<(usize, &mut [f32])> = {
                let mut v = Vec::new();
                let mut rest = &mut out_image[..];
                let n_blocks = rayon::current_num_threads().min(co);
                let per = co.div_ceil(n_blocks);
                let mut c0 = 0;
                while c0 < co {
                    let take = per.min(co - c0);
                    let (head, tail) = rest.split_at_mut(take * ohw);
                    v.push((c0, head));
                    rest = tail;
                    c0 += take;
                }
                v
            };
            let cols_ref = &cols;
            let w_data = w.data();
            blocks.into_par_iter().for_each(|(c0, out_blk)| {
                let m = out_blk.len() / ohw;
                unsafe {
                    sgemm(
                        m,
                        k_total,
                        width,
                        1.0,
                        w_data.as_ptr().add(c0 * k_total),
                        k_total as isize,
                        1,
                        cols_ref.as_ptr(),
                        width as isize,
                        1,
                        0.0,
                        out_blk.as_mut_ptr().add(oy0 * ow),
                        ohw as isize,
                        1,
                    );
                }
            });
            oy0 += rows;
        }
        if let Some(b) = bias {
            for (c, &bv) in b.iter().enumerate() {
                for v in &mut out_image[c * ohw..(c + 1) * ohw] {
                    *v += bv;
                }
            }
        }
    }
    Ok(out)
}

/// Insert `stride - 1` zeros between elements of each spatial dim.
fn dilate(g: &Tensor4, stride: usize) -> Tensor4 {
    if stride == 1 {
        return g.clone();
    }
    let d = g.dims();
    let dh = (d.h - 1) * stride + 1;
    let dw = (d.w - 1) * stride + 1;
    let mut out = Tensor4::zeros(Dims::new(d.n, d.c, dh, dw));
    for n in 0..d.n {
        for c in 0..d.c {
            for y in 0..d.h {
                for x in 0..d.w {
                    *out.at_mut(n, c, y * stride, x * stride) = g.at(n, c, y, x);
                }
            }
        }
    }
    out
}

/// Swap in/out channel axes and rotate the taps by 180 degrees.
fn flip_weight(w: &Tensor4) -> Tensor4 {
    let d = w.dims();
    let mut out = Tensor4::zeros(Dims::new(d.c, d.n, d.h, d.w));
    for co in 0..d.n {
        for ci in 0..d.c {
            for ky in 0..d.h {
                for kx in 0..d.w {
                    *out.at_mut(ci, co, ky, kx) = w.at(co, ci, d.h - 1 - ky, d.w - 1 - kx);
                }
            }
        }
    }
    out
}

/// Gradient of the conv output w.r.t. its input. Padding taps discard their
/// gradient, so `pad_value` plays no role here.
pub fn conv2d_bwd_input(
    grad_out: &Tensor4,
    w: &Tensor4,
    stride: usize,
    pad: Pad2,
    x_dims: Dims,
) -> Result<Tensor4> {
    let wd = w.dims();
    let g = dilate(grad_out, stride);
    let gd = g.dims();
    let wf = flip_weight(w);
    let pt = wd.h as isize - 1 - pad.top;
    let pl = wd.w as isize - 1 - pad.left;
    let pb = x_dims.h as isize - 1 + wd.h as isize - gd.h as isize - pt;
    let pr = x_dims.w as isize - 1 + wd.w as isize - gd.w as isize - pl;
    let dx = conv2d_fwd(
        &g,
        &wf,
        None,
        1,
        Pad2 {
            top: pt,
            bottom: pb,
            left: pl,
            right: pr,
        },
        0.0,
    )?;
    debug_assert_eq!(dx.dims(), x_dims);
    Ok(dx)
}

/// Gradient of the conv output w.r.t. the weight (and bias when requested).
/// The forward `pad_value` must be passed back in since padded taps do
/// contribute to the weight gradient.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_bwd_weight(
    x: &Tensor4,
    grad_out: &Tensor4,
    stride: usize,
    pad: Pad2,
    pad_value: f32,
    w_dims: Dims,
    want_bias: bool,
) -> Result<(Tensor4, Option<Vec<f32>>)> {
    let xd = x.dims();
    let gd = grad_out.dims();
    let (co, kh, kw) = (w_dims.n, w_dims.h, w_dims.w);
    let k_total = w_dims.c * kh * kw;
    let (oh, ow) = (gd.h, gd.w);
    let ohw = oh * ow;
    let mut gw = Tensor4::zeros(w_dims);
    let rows_per_chunk = chunk_rows(k_total, ow, oh);

    // Per-chunk partial products, reduced in chunk order for determinism.
    for n in 0..xd.n {
        let chunks: Vec<(usize, usize)> = {
            let mut v = Vec::new();
            let mut oy0 = 0;
            while oy0 < oh {
                let rows = rows_per_chunk.min(oh - oy0);
                v.push((oy0, rows));
                oy0 += rows;
            }
            v
        };
        let partials: Vec<Vec<f32>> = chunks
            .par_iter()
            .map(|&(oy0, rows)| {
                let width = rows * ow;
                let mut cols = vec![0.0f32; k_total * width];
                im2col_rows(x, n, oy0, rows, ow, kh, kw, stride, pad, pad_value, &mut cols);
                let mut part = vec![0.0f32; co * k_total];
                unsafe {
                    sgemm(
                        co,
                        width,
                        k_total,
                        1.0,
                        grad_out.data().as_ptr().add(n * co * ohw + oy0 * ow),
                        ohw as isize,
                        1,
                        cols.as_ptr(),
                        1,
                        width as isize,
                        0.0,
                        part.as_mut_ptr(),
                        k_total as isize,
                        1,
                    );
                }
                part
            })
            .collect();
        let gw_data = gw.data_mut();
        for part in partials {
            for (dst, src) in gw_data.iter_mut().zip(part.iter()) {
                *dst += src;
            }
        }
    }
    let gb = if want_bias {
        let mut b = vec![0.0f32; co];
        for n in 0..gd.n {
            for (c, acc) in b.iter_mut().enumerate() {
                *acc += grad_out.plane(n, c).iter().sum::<f32>();
            }
        }
        Some(b)
    } else {
        None
    };
    Ok((gw, gb))
}
