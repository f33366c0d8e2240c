//! Learnable building blocks: the timestep-grouped bias/RPReLU banks, the
//! binarized convolution block with identity shortcut, the residual block
//! with timestep injection, and sinusoidal time encoding.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::engine::{Engine, Param, ParamBuilder};
use crate::error::{contract_err, Result};
use crate::tensor::{Dims, Tensor4};

/// Timestep context threaded through every forward pass. `t_total` is the
/// diffusion schedule length the bias/activation banks partition.
#[derive(Debug, Clone, Copy)]
pub struct TimestepCtx {
    pub t: usize,
    pub t_total: usize,
}

/// Map a timestep onto its bank group (1-based). The groups partition
/// [1, t_total] into `k` contiguous runs of equal size (within one when
/// t_total is not a multiple of k).
pub fn timestep_group(t: usize, t_total: usize, k: usize) -> Result<usize> {
    if t < 1 || t > t_total {
        return contract_err(format!("timestep {t} outside [1, {t_total}]"));
    }
    if k < 1 || k > t_total {
        return contract_err(format!("pair count {k} outside [1, {t_total}]"));
    }
    Ok(((t - 1) * k / t_total + 1).min(k))
}

/// Per-channel RPReLU parameters: input shift, output shift, negative slope.
#[derive(Debug, Clone)]
pub struct RPReLUParams {
    pub gamma: Param,
    pub zeta: Param,
    pub beta: Param,
}

impl RPReLUParams {
    pub fn new(pb: &mut ParamBuilder, prefix: &str, c: usize) -> Self {
        let pd = Dims::new(1, c, 1, 1);
        RPReLUParams {
            gamma: pb.param(format!("{prefix}.gamma"), Tensor4::zeros(pd), false),
            zeta: pb.param(format!("{prefix}.zeta"), Tensor4::zeros(pd), false),
            beta: pb.param(format!("{prefix}.beta"), Tensor4::filled(pd, 0.25), false),
        }
    }
}

pub(crate) fn kaiming(rng: &mut impl Rng, dims: Dims, fan_in: usize) -> Tensor4 {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).unwrap();
    let data = (0..dims.len()).map(|_| dist.sample(rng) as f32).collect();
    Tensor4::from_vec(dims, data).unwrap()
}

/// One binarized 3x3 convolution block: a bank of `k_pairs` learnable shift
/// biases and RPReLU activations (one pair selected per timestep group), the
/// latent full-precision weight binarized fresh on every forward, and an
/// identity shortcut when the shapes allow it.
#[derive(Debug, Clone)]
pub struct BinConvLayer {
    pub name: String,
    pub weight: Param,
    pub biases: Vec<Param>,
    pub rprelus: Vec<RPReLUParams>,
    pub k_pairs: usize,
    pub use_shortcut: bool,
    pub c_in: usize,
    pub c_out: usize,
}

impl BinConvLayer {
    pub fn new(
        pb: &mut ParamBuilder,
        rng: &mut impl Rng,
        name: impl Into<String>,
        c_in: usize,
        c_out: usize,
        k_pairs: usize,
        use_shortcut: bool,
    ) -> Self {
        let name = name.into();
        assert!(k_pairs >= 1, "need at least one bias/RPReLU pair");
        assert!(
            !use_shortcut || c_in == c_out,
            "identity shortcut needs matching channel counts"
        );
        let wd = Dims::new(c_out, c_in, 3, 3);
        let weight = pb.param(format!("{name}.w"), kaiming(rng, wd, c_in * 9), true);
        let biases = (0..k_pairs)
            .map(|i| {
                pb.param(
                    format!("{name}.bias{i}"),
                    Tensor4::zeros(Dims::new(1, c_in, 1, 1)),
                    false,
                )
            })
            .collect();
        let rprelus = (0..k_pairs)
            .map(|i| RPReLUParams::new(pb, &format!("{name}.act{i}"), c_out))
            .collect();
        BinConvLayer {
            name,
            weight,
            biases,
            rprelus,
            k_pairs,
            use_shortcut,
            c_in,
            c_out,
        }
    }

    /// x + RPReLU_g(binconv(sign(x + b_g))) with g the timestep group.
    /// Exactly one bias/RPReLU pair participates per forward.
    pub fn forward<E: Engine>(&self, eng: &mut E, x: &E::Val, tc: TimestepCtx) -> Result<E::Val> {
        let g = timestep_group(tc.t, tc.t_total, self.k_pairs)?;
        eng.observe(&self.name, x);
        let shifted = eng.add_param_bcast(x, &self.biases[g - 1])?;
        let conv = eng.binconv2d(&shifted, &self.weight, 1, 1)?;
        let p = &self.rprelus[g - 1];
        let act = eng.rprelu(&conv, &p.gamma, &p.zeta, &p.beta)?;
        if self.use_shortcut {
            eng.add(x, &act)
        } else {
            Ok(act)
        }
    }

    pub fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.weight);
        for b in &self.biases {
            f(b);
        }
        for p in &self.rprelus {
            f(&p.gamma);
            f(&p.zeta);
            f(&p.beta);
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        for b in &mut self.biases {
            f(b);
        }
        for p in &mut self.rprelus {
            f(&mut p.gamma);
            f(&mut p.zeta);
            f(&mut p.beta);
        }
    }
}

/// Residual block: two binarized conv blocks with the timestep embedding
/// added (via a full-precision per-block projection) after the first. The
/// identity path runs through the conv blocks' own shortcuts, so with zero
/// weights the block reduces to x plus the learned shifts; stacking a second
/// outer add on top would double the signal at every block and blow the
/// activation range up exponentially with depth. Input and output dims are
/// identical.
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub conv1: BinConvLayer,
    pub conv2: BinConvLayer,
    pub time_w: Param,
    pub time_b: Param,
}

impl ResBlock {
    pub fn new(
        pb: &mut ParamBuilder,
        rng: &mut impl Rng,
        name: &str,
        c: usize,
        t_dim: usize,
        k_pairs: usize,
        use_shortcut: bool,
    ) -> Self {
        ResBlock {
            conv1: BinConvLayer::new(pb, rng, format!("{name}.conv1"), c, c, k_pairs, use_shortcut),
            conv2: BinConvLayer::new(pb, rng, format!("{name}.conv2"), c, c, k_pairs, use_shortcut),
            time_w: pb.param(
                format!("{name}.time.w"),
                kaiming(rng, Dims::new(c, t_dim, 1, 1), t_dim),
                false,
            ),
            time_b: pb.param(
                format!("{name}.time.b"),
                Tensor4::zeros(Dims::new(1, c, 1, 1)),
                false,
            ),
        }
    }

    pub fn forward<E: Engine>(
        &self,
        eng: &mut E,
        x: &E::Val,
        t_em: &E::Val,
        tc: TimestepCtx,
    ) -> Result<E::Val> {
        let h = self.conv1.forward(eng, x, tc)?;
        let proj = eng.conv2d(t_em, &self.time_w, Some(&self.time_b), 1, 0)?;
        let h = eng.add_bcast(&h, &proj)?;
        self.conv2.forward(eng, &h, tc)
    }

    pub fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.conv1.visit_params(f);
        self.conv2.visit_params(f);
        f(&self.time_w);
        f(&self.time_b);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv1.visit_params_mut(f);
        self.conv2.visit_params_mut(f);
        f(&mut self.time_w);
        f(&mut self.time_b);
    }
}

/// Sinusoidal position encoding of a timestep: pair i of the length-`c`
/// vector holds (sin(t/10000^(2i/c)), cos(t/10000^(2i/c))).
pub fn sinusoid_encoding(t: usize, c: usize) -> Result<Vec<f32>> {
    if c == 0 || !c.is_multiple_of(2) {
        return contract_err(format!("encoding width must be even, got {c}"));
    }
    let mut v = vec![0.0f32; c];
    for i in 0..c / 2 {
        let freq = 10000f64.powf(-2.0 * i as f64 / c as f64);
        let arg = t as f64 * freq;
        v[2 * i] = arg.sin() as f32;
        v[2 * i + 1] = arg.cos() as f32;
    }
    Ok(v)
}

/// Two full-precision 1x1 projections with a smooth nonlinearity between,
/// turning the sinusoidal encoding into the shared timestep embedding.
#[derive(Debug, Clone)]
pub struct TimeMlp {
    pub w1: Param,
    pub b1: Param,
    pub w2: Param,
    pub b2: Param,
    pub c: usize,
}

impl TimeMlp {
    pub fn new(pb: &mut ParamBuilder, rng: &mut impl Rng, name: &str, c: usize) -> Self {
        TimeMlp {
            w1: pb.param(
                format!("{name}.w1"),
                kaiming(rng, Dims::new(c, c, 1, 1), c),
                false,
            ),
            b1: pb.param(format!("{name}.b1"), Tensor4::zeros(Dims::new(1, c, 1, 1)), false),
            w2: pb.param(
                format!("{name}.w2"),
                kaiming(rng, Dims::new(c, c, 1, 1), c),
                false,
            ),
            b2: pb.param(format!("{name}.b2"), Tensor4::zeros(Dims::new(1, c, 1, 1)), false),
            c,
        }
    }

    /// Embedding for a batch of `n` samples sharing timestep `t`.
    pub fn forward<E: Engine>(&self, eng: &mut E, t: usize, n: usize) -> Result<E::Val> {
        let enc = sinusoid_encoding(t, self.c)?;
        let mut data = Vec::with_capacity(n * self.c);
        for _ in 0..n {
            data.extend_from_slice(&enc);
        }
        let base = eng.constant(Tensor4::from_vec(Dims::new(n, self.c, 1, 1), data)?)?;
        let h = eng.conv2d(&base, &self.w1, Some(&self.b1), 1, 0)?;
        let h = eng.silu(&h)?;
        eng.conv2d(&h, &self.w2, Some(&self.b2), 1, 0)
    }

    pub fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.w1);
        f(&self.b1);
        f(&self.w2);
        f(&self.b2);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.w1);
        f(&mut self.b1);
        f(&mut self.w2);
        f(&mut self.b2);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{BinExec, EagerEngine};
    use crate::tape::TapeEngine;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    #[test]
    fn group_boundaries_match_the_declared_mapping() {
        assert_eq!(timestep_group(1, 2000, 5).unwrap(), 1);
        assert_eq!(timestep_group(400, 2000, 5).unwrap(), 1);
        assert_eq!(timestep_group(401, 2000, 5).unwrap(), 2);
        assert_eq!(timestep_group(2000, 2000, 5).unwrap(), 5);
    }

    #[test]
    fn single_group_always_selects_one() {
        for t in [1usize, 997, 2000] {
            assert_eq!(timestep_group(t, 2000, 1).unwrap(), 1);
        }
    }

    #[test]
    fn groups_are_monotone_and_nonempty() {
        for k in [1usize, 2, 5] {
            let mut counts = vec![0usize; k];
            let mut prev = 1;
            for t in 1..=2000 {
                let g = timestep_group(t, 2000, k).unwrap();
                assert!(g >= prev);
                counts[g - 1] += 1;
                prev = g;
            }
            assert!(counts.iter().all(|&c| c > 0));
            if 2000 % k == 0 {
                assert!(counts.iter().all(|&c| c == 2000 / k));
            }
        }
    }

    #[test]
    fn out_of_range_timestep_is_a_contract_error() {
        assert!(timestep_group(0, 2000, 5).is_err());
        assert!(timestep_group(2001, 2000, 5).is_err());
    }

    #[test]
    fn zero_weight_block_adds_the_selected_output_shift() {
        let mut pb = ParamBuilder::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut layer = BinConvLayer::new(&mut pb, &mut rng, "l", 4, 4, 3, true);
        *layer.weight.tensor_mut() = Tensor4::zeros(Dims::new(4, 4, 3, 3));
        // distinct zeta per pair so the selected group is visible
        for (i, p) in layer.rprelus.iter_mut().enumerate() {
            *p.zeta.tensor_mut() = Tensor4::filled(Dims::new(1, 4, 1, 1), (i + 1) as f32);
        }
        let x = Tensor4::filled(Dims::new(1, 4, 5, 5), 0.3);
        let mut eng = EagerEngine::new(BinExec::Bits);
        let xv = eng.constant(x.clone()).unwrap();
        // t = 150 of 300 with k = 3 lands in group 2 (zeta = 2)
        let out = layer
            .forward(&mut eng, &xv, TimestepCtx { t: 150, t_total: 300 })
            .unwrap();
        for v in out.data() {
            assert!((v - (0.3 + 2.0)).abs() < 1e-6);
        }
    }

    #[test]
    fn shortcut_off_differs_from_on_by_exactly_x() {
        let mut pb = ParamBuilder::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let with = BinConvLayer::new(&mut pb, &mut rng, "a", 4, 4, 2, true);
        let mut without = with.clone();
        without.use_shortcut = false;
        let data: Vec<f32> = (0..4 * 36).map(|i| ((i as f32) * 0.37).sin()).collect();
        let x = Tensor4::from_vec(Dims::new(1, 4, 6, 6), data).unwrap();
        let tc = TimestepCtx { t: 5, t_total: 10 };
        let mut eng = EagerEngine::new(BinExec::Bits);
        let xv = eng.constant(x.clone()).unwrap();
        let a = with.forward(&mut eng, &xv, tc).unwrap();
        let b = without.forward(&mut eng, &xv, tc).unwrap();
        for ((on, off), xi) in a.data().iter().zip(b.data()).zip(x.data()) {
            assert!((on - off - xi).abs() < 1e-6);
        }
    }

    #[test]
    fn different_groups_produce_different_outputs() {
        let mut pb = ParamBuilder::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut layer = BinConvLayer::new(&mut pb, &mut rng, "l", 4, 4, 2, true);
        *layer.biases[0].tensor_mut() = Tensor4::filled(Dims::new(1, 4, 1, 1), 0.8);
        *layer.biases[1].tensor_mut() = Tensor4::filled(Dims::new(1, 4, 1, 1), -0.8);
        let data: Vec<f32> = (0..4 * 16).map(|i| ((i as f32) * 0.11).cos() * 0.5).collect();
        let x = Tensor4::from_vec(Dims::new(1, 4, 4, 4), data).unwrap();
        let mut eng = EagerEngine::new(BinExec::Bits);
        let xv = eng.constant(x).unwrap();
        let lo = layer
            .forward(&mut eng, &xv, TimestepCtx { t: 1, t_total: 100 })
            .unwrap();
        let hi = layer
            .forward(&mut eng, &xv, TimestepCtx { t: 100, t_total: 100 })
            .unwrap();
        assert_ne!(lo.data(), hi.data());
    }

    #[test]
    fn gradient_support_is_confined_to_the_selected_pair() {
        let mut pb = ParamBuilder::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let layer = BinConvLayer::new(&mut pb, &mut rng, "l", 4, 4, 5, true);
        let mut tape = TapeEngine::new();
        let data: Vec<f32> = (0..4 * 16).map(|i| ((i as f32) * 0.21).sin()).collect();
        let x = tape
            .leaf(Tensor4::from_vec(Dims::new(1, 4, 4, 4), data).unwrap(), false)
            .unwrap();
        let tc = TimestepCtx { t: 777, t_total: 2000 };
        let g = timestep_group(tc.t, tc.t_total, 5).unwrap();
        let out = layer.forward(&mut tape, &x, tc).unwrap();
        let loss = tape.sum_all(out).unwrap();
        tape.backward(loss).unwrap();
        let grads: std::collections::HashMap<_, _> =
            tape.param_grads().into_iter().collect();
        for (i, b) in layer.biases.iter().enumerate() {
            assert_eq!(grads.contains_key(&b.id), i == g - 1, "bias {i}");
        }
        for (i, p) in layer.rprelus.iter().enumerate() {
            assert_eq!(grads.contains_key(&p.zeta.id), i == g - 1, "zeta {i}");
        }
        // the selected zeta gets gradient = number of output elements (sum loss)
        let gz = grads[&layer.rprelus[g - 1].zeta.id];
        assert!(gz.data().iter().all(|&v| v != 0.0));
    }

    #[test]
    fn resblock_with_zero_weights_is_a_pure_shift_path() {
        let mut pb = ParamBuilder::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut rb = ResBlock::new(&mut pb, &mut rng, "rb", 4, 8, 2, true);
        *rb.conv1.weight.tensor_mut() = Tensor4::zeros(Dims::new(4, 4, 3, 3));
        *rb.conv2.weight.tensor_mut() = Tensor4::zeros(Dims::new(4, 4, 3, 3));
        *rb.time_w.tensor_mut() = Tensor4::zeros(Dims::new(4, 8, 1, 1));
        for p in [&mut rb.conv1, &mut rb.conv2] {
            for act in &mut p.rprelus {
                *act.zeta.tensor_mut() = Tensor4::filled(Dims::new(1, 4, 1, 1), 0.5);
            }
        }
        let x = Tensor4::filled(Dims::new(1, 4, 4, 4), 1.0);
        let mut eng = EagerEngine::new(BinExec::Bits);
        let xv = eng.constant(x).unwrap();
        let t_em = eng.constant(Tensor4::zeros(Dims::new(1, 8, 1, 1))).unwrap();
        let out = rb
            .forward(&mut eng, &xv, &t_em, TimestepCtx { t: 1, t_total: 4 })
            .unwrap();
        // pure shift path: x + zeta + time(0) + zeta = 1 + 0.5 + 0.5 = 2
        for v in out.data() {
            assert!((v - 2.0).abs() < 1e-6);
        }
    }

    #[test]
    fn resblock_preserves_shape_at_every_level_width() {
        let mut pb = ParamBuilder::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for c in [64usize, 128, 256, 512] {
            let rb = ResBlock::new(&mut pb, &mut rng, "rb", c, 64, 5, true);
            let x = Tensor4::filled(Dims::new(1, c, 4, 4), 0.1);
            let mut eng = EagerEngine::new(BinExec::Dense);
            let xv = eng.constant(x).unwrap();
            let t_em = eng.constant(Tensor4::zeros(Dims::new(1, 64, 1, 1))).unwrap();
            let out = rb
                .forward(&mut eng, &xv, &t_em, TimestepCtx { t: 3, t_total: 9 })
                .unwrap();
            assert_eq!(out.dims(), Dims::new(1, c, 4, 4));
        }
    }

    #[test]
    fn gradient_reaches_the_time_projection() {
        let mut pb = ParamBuilder::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let rb = ResBlock::new(&mut pb, &mut rng, "rb", 4, 6, 2, true);
        let mut tape = TapeEngine::new();
        let data: Vec<f32> = (0..4 * 16).map(|i| ((i as f32) * 0.13).sin()).collect();
        let x = tape
            .leaf(Tensor4::from_vec(Dims::new(1, 4, 4, 4), data).unwrap(), false)
            .unwrap();
        let t_em = tape
            .leaf(Tensor4::filled(Dims::new(1, 6, 1, 1), 0.4), false)
            .unwrap();
        let out = rb
            .forward(&mut tape, &x, &t_em, TimestepCtx { t: 2, t_total: 4 })
            .unwrap();
        let loss = tape.sum_all(out).unwrap();
        tape.backward(loss).unwrap();
        let grads: std::collections::HashMap<_, _> =
            tape.param_grads().into_iter().collect();
        let gw = grads.get(&rb.time_w.id).expect("time weight gradient");
        assert!(gw.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn encoding_at_zero_is_sin_zero_cos_one() {
        let v = sinusoid_encoding(0, 8).unwrap();
        for i in 0..4 {
            assert_eq!(v[2 * i], 0.0);
            assert_eq!(v[2 * i + 1], 1.0);
        }
    }

    #[test]
    fn encoding_is_deterministic_and_collision_free() {
        let a = sinusoid_encoding(1234, 64).unwrap();
        let b = sinusoid_encoding(1234, 64).unwrap();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        let mut seen = HashSet::new();
        for t in 1..=2000 {
            let v = sinusoid_encoding(t, 64).unwrap();
            let key: Vec<u32> = v.iter().map(|x| x.to_bits()).collect();
            assert!(seen.insert(key), "collision at t = {t}");
        }
    }

    #[test]
    fn odd_width_encoding_is_rejected() {
        assert!(sinusoid_encoding(1, 7).is_err());
    }
}
