//! Elementwise and broadcast kernels plus their adjoints.

use crate::error::{shape_err, Result};
use crate::tensor::{Dims, Tensor4};

pub fn add(a: &Tensor4, b: &Tensor4) -> Result<Tensor4> {
    a.same_dims(b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor4::from_vec(a.dims(), data)
}

pub fn mul(a: &Tensor4, b: &Tensor4) -> Result<Tensor4> {
    a.same_dims(b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor4::from_vec(a.dims(), data)
}

/// `x + b` where `b` broadcasts over any of n/h/w (its dim is 1 there).
/// Channel counts must match exactly.
pub fn add_bcast(x: &Tensor4, b: &Tensor4) -> Result<Tensor4> {
    let xd = x.dims();
    let bd = b.dims();
    if bd.c != xd.c
        || (bd.n != 1 && bd.n != xd.n)
        || (bd.h != 1 && bd.h != xd.h)
        || (bd.w != 1 && bd.w != xd.w)
    {
        return shape_err(format!("cannot broadcast {bd} onto {xd}"));
    }
    let mut out = x.clone();
    for n in 0..xd.n {
        let bn = if bd.n == 1 { 0 } else { n };
        for c in 0..xd.c {
            for y in 0..xd.h {
                let by = if bd.h == 1 { 0 } else { y };
                for xx in 0..xd.w {
                    let bx = if bd.w == 1 { 0 } else { xx };
                    *out.at_mut(n, c, y, xx) += b.at(bn, c, by, bx);
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of the broadcast operand: sum upstream over the broadcast axes.
pub fn reduce_to_dims(g: &Tensor4, target: Dims) -> Tensor4 {
    let gd = g.dims();
    let mut out = Tensor4::zeros(target);
    for n in 0..gd.n {
        let tn = if target.n == 1 { 0 } else { n };
        for c in 0..gd.c {
            for y in 0..gd.h {
                let ty = if target.h == 1 { 0 } else { y };
                for x in 0..gd.w {
                    let tx = if target.w == 1 { 0 } else { x };
                    *out.at_mut(tn, c, ty, tx) += g.at(n, c, y, x);
                }
            }
        }
    }
    out
}

/// RPReLU with per-channel input shift, output shift, and negative slope:
/// `out = x - gamma + zeta` when `x > gamma`, else `beta*(x - gamma) + zeta`.
/// Parameter tensors are (1, c, 1, 1).
pub fn rprelu_fwd(x: &Tensor4, gamma: &Tensor4, zeta: &Tensor4, beta: &Tensor4) -> Result<Tensor4> {
    let xd = x.dims();
    for (p, name) in [(gamma, "gamma"), (zeta, "zeta"), (beta, "beta")] {
        let pd = p.dims();
        if pd != Dims::new(1, xd.c, 1, 1) {
            return shape_err(format!("rprelu {name} dims {pd} do not match {} channels", xd.c));
        }
    }
    let mut out = Tensor4::zeros(xd);
    let hw = xd.h * xd.w;
    for n in 0..xd.n {
        for c in 0..xd.c {
            let (g, z, b) = (gamma.data()[c], zeta.data()[c], beta.data()[c]);
            let src = x.plane(n, c);
            let base = (n * xd.c + c) * hw;
            let dst = &mut out.data_mut()[base..base + hw];
            for (o, &v) in dst.iter_mut().zip(src) {
                let shifted = v - g;
                *o = if v > g { shifted + z } else { b * shifted + z };
            }
        }
    }
    Ok(out)
}

/// Gradients for (x, gamma, zeta, beta). Uses the subgradient of the x > gamma
/// branch split; at the kink both branches agree in value.
pub fn rprelu_bwd(
    x: &Tensor4,
    gamma: &Tensor4,
    beta: &Tensor4,
    grad: &Tensor4,
) -> (Tensor4, Tensor4, Tensor4, Tensor4) {
    let xd = x.dims();
    let pd = Dims::new(1, xd.c, 1, 1);
    let mut gx = Tensor4::zeros(xd);
    let mut gg = Tensor4::zeros(pd);
    let mut gz = Tensor4::zeros(pd);
    let mut gb = Tensor4::zeros(pd);
    for n in 0..xd.n {
        for c in 0..xd.c {
            let (g, b) = (gamma.data()[c], beta.data()[c]);
            let mut acc_g = 0.0f32;
            let mut acc_z = 0.0f32;
            let mut acc_b = 0.0f32;
            let hw = xd.h * xd.w;
            let base = (n * xd.c + c) * hw;
            for i in 0..hw {
                let v = x.data()[base + i];
                let up = grad.data()[base + i];
                if v > g {
                    gx.data_mut()[base + i] = up;
                    acc_g -= up;
                } else {
                    gx.data_mut()[base + i] = b * up;
                    acc_g -= b * up;
                    acc_b += (v - g) * up;
                }
                acc_z += up;
            }
            gg.data_mut()[c] += acc_g;
            gz.data_mut()[c] += acc_z;
            gb.data_mut()[c] += acc_b;
        }
    }
    (gx, gg, gz, gb)
}

pub fn silu_fwd(x: &Tensor4) -> Tensor4 {
    x.map(|v| v * sigmoid(v))
}

pub fn silu_bwd(x: &Tensor4, grad: &Tensor4) -> Tensor4 {
    let data = x
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&v, &g)| {
            let s = sigmoid(v);
            g * (s + v * s * (1.0 - s))
        })
        .collect();
    Tensor4::from_vec(x.dims(), data).unwrap()
}

#[inline]
fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

pub fn sum_all(x: &Tensor4) -> f32 {
    x.data().iter().sum()
}

pub fn mean_all(x: &Tensor4) -> f32 {
    sum_all(x) / x.len() as f32
}

/// Mean absolute difference. Gradient w.r.t. `a` is sign(a-b)/len with the
/// subgradient 0 at ties.
pub fn l1_fwd(a: &Tensor4, b: &Tensor4) -> Result<f32> {
    a.same_dims(b)?;
    let s: f32 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .sum();
    Ok(s / a.len() as f32)
}

pub fn l1_bwd(a: &Tensor4, b: &Tensor4, upstream: f32) -> (Tensor4, Tensor4) {
    let n = a.len() as f32;
    let scale = upstream / n;
    let ga: Vec<f32> = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = x - y;
            if d > 0.0 {
                scale
            } else if d < 0.0 {
                -scale
            } else {
                0.0
            }
        })
        .collect();
    let gb: Vec<f32> = ga.iter().map(|v| -v).collect();
    (
        Tensor4::from_vec(a.dims(), ga).unwrap(),
        Tensor4::from_vec(b.dims(), gb).unwrap(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rprelu_reduces_to_leaky_relu_at_default_params() {
        let x = Tensor4::from_vec(Dims::new(1, 1, 1, 2), vec![2.0, -2.0]).unwrap();
        let gamma = Tensor4::zeros(Dims::new(1, 1, 1, 1));
        let zeta = Tensor4::zeros(Dims::new(1, 1, 1, 1));
        let beta = Tensor4::filled(Dims::new(1, 1, 1, 1), 0.25);
        let out = rprelu_fwd(&x, &gamma, &zeta, &beta).unwrap();
        assert_eq!(out.data(), &[2.0, -0.5]);
    }

    #[test]
    fn rprelu_boundary_uses_else_branch() {
        let x = Tensor4::scalar(1.0);
        let gamma = Tensor4::scalar(1.0);
        let zeta = Tensor4::scalar(3.0);
        let beta = Tensor4::scalar(0.0);
        let out = rprelu_fwd(&x, &gamma, &zeta, &beta).unwrap();
        assert_eq!(out.data(), &[3.0]);
    }

    #[test]
    fn rprelu_is_continuous_at_the_kink() {
        let gamma = Tensor4::scalar(0.7);
        let zeta = Tensor4::scalar(-0.3);
        let beta = Tensor4::scalar(0.25);
        let lo = rprelu_fwd(&Tensor4::scalar(0.7 - 1e-6), &gamma, &zeta, &beta).unwrap();
        let hi = rprelu_fwd(&Tensor4::scalar(0.7 + 1e-6), &gamma, &zeta, &beta).unwrap();
        assert!((lo.data()[0] - hi.data()[0]).abs() < 1e-5);
        let at = rprelu_fwd(&Tensor4::scalar(0.7), &gamma, &zeta, &beta).unwrap();
        assert!((at.data()[0] - (-0.3)).abs() < 1e-6);
    }

    #[test]
    fn l1_basics() {
        let a = Tensor4::filled(Dims::new(1, 1, 2, 2), 2.0);
        let b = Tensor4::filled(Dims::new(1, 1, 2, 2), 1.0);
        assert_eq!(l1_fwd(&a, &a).unwrap(), 0.0);
        assert_eq!(l1_fwd(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn add_bcast_broadcasts_channel_bias_and_batch_vector() {
        let x = Tensor4::filled(Dims::new(2, 2, 2, 2), 1.0);
        let bias =
            Tensor4::from_vec(Dims::new(1, 2, 1, 1), vec![10.0, 20.0]).unwrap();
        let out = add_bcast(&x, &bias).unwrap();
        assert_eq!(out.at(1, 0, 1, 1), 11.0);
        assert_eq!(out.at(0, 1, 0, 0), 21.0);

        let per_batch =
            Tensor4::from_vec(Dims::new(2, 2, 1, 1), vec![1., 2., 3., 4.]).unwrap();
        let out2 = add_bcast(&x, &per_batch).unwrap();
        assert_eq!(out2.at(0, 0, 1, 0), 2.0);
        assert_eq!(out2.at(1, 1, 0, 1), 5.0);
    }

    #[test]
    fn reduce_to_dims_sums_broadcast_axes() {
        let g = Tensor4::filled(Dims::new(2, 3, 4, 5), 1.0);
        let r = reduce_to_dims(&g, Dims::new(1, 3, 1, 1));
        assert_eq!(r.data(), &[40.0, 40.0, 40.0]);
    }
}
