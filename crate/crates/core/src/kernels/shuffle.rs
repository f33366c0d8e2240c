//! Pixel (un)shuffle and channel selection kernels. All of these are pure
//! permutations of the data, so each backward is the inverse permutation.

use crate::error::{shape_err, Result};
use crate::tensor::{Dims, Tensor4};

/// Sub-pixel rearrangement: (n, c, h, w) -> (n, c/r^2, h*r, w*r).
/// The r^2 channel block at output offset (dy, dx) is ordered row-major in
/// (c_out, dy, dx), i.e. channel index = (c_out * r + dy) * r + dx.
pub fn pixel_shuffle(x: &Tensor4, r: usize) -> Result<Tensor4> {
    if r == 0 {
        return shape_err("pixel_shuffle factor must be >= 1".to_string());
    }
    let d = x.dims();
    if !d.c.is_multiple_of(r * r) {
        return shape_err(format!("channels {} not divisible by r^2 = {}", d.c, r * r));
    }
    if r == 1 {
        return Ok(x.clone());
    }
    let od = Dims::new(d.n, d.c / (r * r), d.h * r, d.w * r);
    let mut out = Tensor4::zeros(od);
    for n in 0..d.n {
        for co in 0..od.c {
            for dy in 0..r {
                for dx in 0..r {
                    let ci = (co * r + dy) * r + dx;
                    for y in 0..d.h {
                        for xx in 0..d.w {
                            *out.at_mut(n, co, y * r + dy, xx * r + dx) = x.at(n, ci, y, xx);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Exact inverse of [`pixel_shuffle`]: (n, c, h, w) -> (n, c*r^2, h/r, w/r).
pub fn pixel_unshuffle(x: &Tensor4, r: usize) -> Result<Tensor4> {
    if r == 0 {
        return shape_err("pixel_unshuffle factor must be >= 1".to_string());
    }
    let d = x.dims();
    if !d.h.is_multiple_of(r) || !d.w.is_multiple_of(r) {
        return shape_err(format!(
            "spatial dims {}x{} not divisible by r = {}",
            d.h, d.w, r
        ));
    }
    if r == 1 {
        return Ok(x.clone());
    }
    let od = Dims::new(d.n, d.c * r * r, d.h / r, d.w / r);
    let mut out = Tensor4::zeros(od);
    for n in 0..d.n {
        for ci in 0..d.c {
            for dy in 0..r {
                for dx in 0..r {
                    let co = (ci * r + dy) * r + dx;
                    for y in 0..od.h {
                        for xx in 0..od.w {
                            *out.at_mut(n, co, y, xx) = x.at(n, ci, y * r + dy, xx * r + dx);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Select channels by index, in order. Gradient is a scatter-add back into
/// the source channels (an index may appear more than once).
pub fn gather_c(x: &Tensor4, idx: &[usize]) -> Result<Tensor4> {
    let d = x.dims();
    if let Some(&bad) = idx.iter().find(|&&i| i >= d.c) {
        return shape_err(format!("channel index {bad} out of range (c = {})", d.c));
    }
    let od = Dims::new(d.n, idx.len(), d.h, d.w);
    let mut out = Tensor4::zeros(od);
    let hw = d.h * d.w;
    for n in 0..d.n {
        for (o, &ci) in idx.iter().enumerate() {
            let src = x.plane(n, ci);
            let base = (n * od.c + o) * hw;
            out.data_mut()[base..base + hw].copy_from_slice(src);
        }
    }
    Ok(out)
}

pub fn gather_c_bwd(grad: &Tensor4, idx: &[usize], src_dims: Dims) -> Tensor4 {
    let gd = grad.dims();
    let mut out = Tensor4::zeros(src_dims);
    let hw = src_dims.h * src_dims.w;
    for n in 0..gd.n {
        for (o, &ci) in idx.iter().enumerate() {
            let gbase = (n * gd.c + o) * hw;
            let obase = (n * src_dims.c + ci) * hw;
            for i in 0..hw {
                out.data_mut()[obase + i] += grad.data()[gbase + i];
            }
        }
    }
    out
}

/// Concatenate along the channel axis.
pub fn concat_c(a: &Tensor4, b: &Tensor4) -> Result<Tensor4> {
    let (ad, bd) = (a.dims(), b.dims());
    if ad.n != bd.n || ad.h != bd.h || ad.w != bd.w {
        return shape_err(format!("concat dims {ad} vs {bd}"));
    }
    let od = Dims::new(ad.n, ad.c + bd.c, ad.h, ad.w);
    let mut out = Tensor4::zeros(od);
    let hw = ad.h * ad.w;
    for n in 0..ad.n {
        for c in 0..ad.c {
            let base = (n * od.c + c) * hw;
            out.data_mut()[base..base + hw].copy_from_slice(a.plane(n, c));
        }
        for c in 0..bd.c {
            let base = (n * od.c + ad.c + c) * hw;
            out.data_mut()[base..base + hw].copy_from_slice(b.plane(n, c));
        }
    }
    Ok(out)
}

/// Channel-shuffle index pairs for fusing two C-channel features: the first
/// output takes the odd-position channels of both inputs (1-based), the
/// second the even-position channels. Indices refer to the 2C concatenation.
pub fn channel_shuffle_indices(c: usize) -> (Vec<usize>, Vec<usize>) {
    let odd: Vec<usize> = (0..c)
        .step_by(2)
        .chain((c..2 * c).step_by(2))
        .collect();
    let even: Vec<usize> = (1..c)
        .step_by(2)
        .chain((c + 1..2 * c).step_by(2))
        .collect();
    (odd, even)
}
