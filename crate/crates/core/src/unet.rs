//! The encoder-bottleneck-decoder noise-estimation network.
//!
//! All feature reshaping is confined to the consistent-pixel down/upsample
//! modules so every binarized convolution keeps matching input/output
//! dimensions and its identity shortcut. Skip connections fuse through
//! channel shuffling, which balances the value ranges of the encoder and
//! decoder features before two binarized convolutions merge them.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{kaiming, BinConvLayer, ResBlock, TimeMlp, TimestepCtx};
use crate::engine::{Engine, Param, ParamBuilder};
use crate::error::{shape_err, Result};
use crate::kernels::channel_shuffle_indices;
use crate::tensor::{Dims, Tensor4};

/// How the decoder merges each skip feature with its own stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Channel shuffle, two binarized convolutions, addition.
    #[default]
    CsFusion,
    /// Plain addition.
    Add,
    /// Concatenate, one binarized 2C->C convolution (no shortcut possible).
    Concat,
    /// Two binarized convolutions and addition, without the shuffle.
    Split,
}

fn default_levels() -> usize {
    4
}
fn default_n_e() -> usize {
    2
}
fn default_n_d() -> usize {
    3
}
fn default_base_channels() -> usize {
    64
}
fn default_k_pairs() -> usize {
    5
}
fn default_in_channels() -> usize {
    6
}
fn default_out_channels() -> usize {
    3
}
fn default_true() -> bool {
    true
}
fn default_bottleneck() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    #[serde(default = "default_levels")]
    pub levels: usize,
    #[serde(default = "default_n_e")]
    pub n_e: usize,
    #[serde(default = "default_n_d")]
    pub n_d: usize,
    #[serde(default = "default_base_channels")]
    pub base_channels: usize,
    #[serde(default = "default_k_pairs")]
    pub k_pairs: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    #[serde(default = "default_out_channels")]
    pub out_channels: usize,
    #[serde(default = "default_true")]
    pub use_identity_shortcut: bool,
    #[serde(default)]
    pub fusion_mode: FusionMode,
    #[serde(default = "default_bottleneck")]
    pub bottleneck_blocks: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            levels: 4,
            n_e: 2,
            n_d: 3,
            base_channels: 64,
            k_pairs: 5,
            in_channels: 6,
            out_channels: 3,
            use_identity_shortcut: true,
            fusion_mode: FusionMode::CsFusion,
            bottleneck_blocks: 2,
        }
    }
}

impl UNetConfig {
    /// Channel count at level `l`: base * 2^l.
    pub fn channels_at(&self, l: usize) -> usize {
        self.base_channels << l
    }

    /// Spatial divisibility the forward pass requires.
    pub fn resolution_multiple(&self) -> usize {
        1 << self.levels
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.n_e == 0 || self.n_d == 0 || self.bottleneck_blocks == 0 {
            return shape_err("levels and block counts must be positive".to_string());
        }
        if !self.base_channels.is_multiple_of(2) {
            return shape_err("base_channels must be even".to_string());
        }
        if self.k_pairs == 0 {
            return shape_err("k_pairs must be >= 1".to_string());
        }
        Ok(())
    }
}

/// Halve the resolution and double the channels without breaking the
/// identity-shortcut path: split channels, convolve each half at fixed
/// dims, add, pixel-unshuffle.
#[derive(Debug, Clone)]
pub struct CpDown {
    pub c1: BinConvLayer,
    pub c2: BinConvLayer,
    half: usize,
}

impl CpDown {
    pub fn new(
        pb: &mut ParamBuilder,
        rng: &mut impl rand::Rng,
        name: &str,
        c: usize,
        k_pairs: usize,
        shortcut: bool,
    ) -> Self {
        let half = c / 2;
        CpDown {
            c1: BinConvLayer::new(pb, rng, format!("{name}.c1"), half, half, k_pairs, shortcut),
            c2: BinConvLayer::new(pb, rng, format!("{name}.c2"), half, half, k_pairs, shortcut),
            half,
        }
    }

    pub fn forward<E: Engine>(&self, eng: &mut E, x: &E::Val, tc: TimestepCtx) -> Result<E::Val> {
        let d = eng.dims(x);
        if d.c != 2 * self.half {
            return shape_err(format!("cp_down built for {} channels, got {}", 2 * self.half, d.c));
        }
        if d.h % 2 != 0 || d.w % 2 != 0 || d.c % 2 != 0 {
            return shape_err(format!("cp_down needs even dims, got {d}"));
        }
        let lo: Vec<usize> = (0..self.half).collect();
        let hi: Vec<usize> = (self.half..d.c).collect();
        let x1 = eng.gather_c(x, &lo)?;
        let x2 = eng.gather_c(x, &hi)?;
        let y1 = self.c1.forward(eng, &x1, tc)?;
        let y2 = self.c2.forward(eng, &x2, tc)?;
        let sum = eng.add(&y1, &y2)?;
        eng.pixel_unshuffle(&sum, 2)
    }

    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.c1.visit_params(f);
        self.c2.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.c1.visit_params_mut(f);
        self.c2.visit_params_mut(f);
    }
}

/// Double the resolution and halve the channels: two fixed-dim convolutions,
/// concatenate, pixel-shuffle.
#[derive(Debug, Clone)]
pub struct CpUp {
    pub c1: BinConvLayer,
    pub c2: BinConvLayer,
}

impl CpUp {
    pub fn new(
        pb: &mut ParamBuilder,
        rng: &mut impl rand::Rng,
        name: &str,
        c: usize,
        k_pairs: usize,
        shortcut: bool,
    ) -> Self {
        CpUp {
            c1: BinConvLayer::new(pb, rng, format!("{name}.c1"), c, c, k_pairs, shortcut),
            c2: BinConvLayer::new(pb, rng, format!("{name}.c2"), c, c, k_pairs, shortcut),
        }
    }

    pub fn forward<E: Engine>(&self, eng: &mut E, x: &E::Val, tc: TimestepCtx) -> Result<E::Val> {
        let d = eng.dims(x);
        if 2 * d.c % 4 != 0 {
            return shape_err(format!("cp_up needs an even channel count, got {}", d.c));
        }
        let y1 = self.c1.forward(eng, x, tc)?;
        let y2 = self.c2.forward(eng, x, tc)?;
        let cat = eng.concat_c(&y1, &y2)?;
        eng.pixel_shuffle(&cat, 2)
    }

    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.c1.visit_params(f);
        self.c2.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.c1.visit_params_mut(f);
        self.c2.visit_params_mut(f);
    }
}

/// Interleave the odd/even channels (1-based) of two same-shaped features
/// into two shuffled features. Pure permutation of the 2C combined channels.
pub fn channel_shuffle<E: Engine>(
    eng: &mut E,
    x1: &E::Val,
    x2: &E::Val,
) -> Result<(E::Val, E::Val)> {
    let (d1, d2) = (eng.dims(x1), eng.dims(x2));
    if d1 != d2 {
        return shape_err(format!("channel_shuffle dims {d1} vs {d2}"));
    }
    if d1.c % 2 != 0 {
        return shape_err(format!("channel_shuffle needs even channels, got {}", d1.c));
    }
    let cat = eng.concat_c(x1, x2)?;
    let (odd, even) = channel_shuffle_indices(d1.c);
    let s1 = eng.gather_c(&cat, &odd)?;
    let s2 = eng.gather_c(&cat, &even)?;
    Ok((s1, s2))
}

/// Skip-connection fusion module; the variant is an ablation axis.
#[derive(Debug, Clone)]
pub enum Fusion {
    Cs { c1: BinConvLayer, c2: BinConvLayer },
    Add,
    Concat { conv: BinConvLayer },
    Split { c1: BinConvLayer, c2: BinConvLayer },
}

impl Fusion {
    fn new(
        pb: &mut ParamBuilder,
        rng: &mut impl rand::Rng,
        name: &str,
        c: usize,
        k_pairs: usize,
        shortcut: bool,
        mode: FusionMode,
    ) -> Self {
        match mode {
            FusionMode::CsFusion => Fusion::Cs {
                c1: BinConvLayer::new(pb, rng, format!("{name}.c1"), c, c, k_pairs, shortcut),
                c2: BinConvLayer::new(pb, rng, format!("{name}.c2"), c, c, k_pairs, shortcut),
            },
            FusionMode::Add => Fusion::Add,
            FusionMode::Concat => Fusion::Concat {
                conv: BinConvLayer::new(pb, rng, format!("{name}.conv"), 2 * c, c, k_pairs, false),
            },
            FusionMode::Split => Fusion::Split {
                c1: BinConvLayer::new(pb, rng, format!("{name}.c1"), c, c, k_pairs, shortcut),
                c2: BinConvLayer::new(pb, rng, format!("{name}.c2"), c, c, k_pairs, shortcut),
            },
        }
    }

    pub fn forward<E: Engine>(
        &self,
        eng: &mut E,
        x: &E::Val,
        skip: &E::Val,
        tc: TimestepCtx,
    ) -> Result<E::Val> {
        let (dx, ds) = (eng.dims(x), eng.dims(skip));
        if dx != ds {
            return shape_err(format!("fusion dims {dx} vs skip {ds}"));
        }
        match self {
            Fusion::Cs { c1, c2 } => {
                let (s1, s2) = channel_shuffle(eng, x, skip)?;
                let y1 = c1.forward(eng, &s1, tc)?;
                let y2 = c2.forward(eng, &s2, tc)?;
                eng.add(&y1, &y2)
            }
            Fusion::Add => eng.add(x, skip),
            Fusion::Concat { conv } => {
                let cat = eng.concat_c(x, skip)?;
                conv.forward(eng, &cat, tc)
            }
            Fusion::Split { c1, c2 } => {
                let y1 = c1.forward(eng, x, tc)?;
                let y2 = c2.forward(eng, skip, tc)?;
                eng.add(&y1, &y2)
            }
        }
    }

    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        match self {
            Fusion::Cs { c1, c2 } | Fusion::Split { c1, c2 } => {
                c1.visit_params(f);
                c2.visit_params(f);
            }
            Fusion::Add => {}
            Fusion::Concat { conv } => conv.visit_params(f),
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        match self {
            Fusion::Cs { c1, c2 } | Fusion::Split { c1, c2 } => {
                c1.visit_params_mut(f);
                c2.visit_params_mut(f);
            }
            Fusion::Add => {}
            Fusion::Concat { conv } => conv.visit_params_mut(f),
        }
    }
}

#[derive(Debug, Clone)]
struct EncLevel {
    blocks: Vec<ResBlock>,
    down: Option<CpDown>,
}

#[derive(Debug, Clone)]
struct DecLevel {
    fuse: Fusion,
    blocks: Vec<ResBlock>,
    up: Option<CpUp>,
}

/// The full noise-prediction UNet. Parameters are immutable during a forward
/// pass; the optimizer is the only writer, between steps.
#[derive(Debug, Clone)]
pub struct UNet {
    pub cfg: UNetConfig,
    head_w: Param,
    head_b: Param,
    time_mlp: TimeMlp,
    enc: Vec<EncLevel>,
    mid: Vec<ResBlock>,
    dec: Vec<DecLevel>,
    tail_w: Param,
    tail_b: Param,
    param_count: usize,
}

impl UNet {
    pub fn new(cfg: UNetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut pb = ParamBuilder::new();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let c0 = cfg.base_channels;
        let head_w = pb.param(
            "head.w",
            kaiming(&mut rng, Dims::new(c0, cfg.in_channels, 3, 3), cfg.in_channels * 9),
            false,
        );
        let head_b = pb.param("head.b", Tensor4::zeros(Dims::new(1, c0, 1, 1)), false);
        let time_mlp = TimeMlp::new(&mut pb, &mut rng, "time_mlp", c0);
        let sc = cfg.use_identity_shortcut;

        let mut enc = Vec::new();
        for l in 0..cfg.levels {
            let c = cfg.channels_at(l);
            let blocks = (0..cfg.n_e)
                .map(|i| {
                    ResBlock::new(&mut pb, &mut rng, &format!("enc{l}.rb{i}"), c, c0, cfg.k_pairs, sc)
                })
                .collect();
            let down = (l + 1 < cfg.levels)
                .then(|| CpDown::new(&mut pb, &mut rng, &format!("enc{l}.down"), c, cfg.k_pairs, sc));
            enc.push(EncLevel { blocks, down });
        }

        let c_mid = cfg.channels_at(cfg.levels - 1);
        let mid = (0..cfg.bottleneck_blocks)
            .map(|i| ResBlock::new(&mut pb, &mut rng, &format!("mid.rb{i}"), c_mid, c0, cfg.k_pairs, sc))
            .collect();

        let mut dec = Vec::new();
        for l in (0..cfg.levels).rev() {
            let c = cfg.channels_at(l);
            let fuse = Fusion::new(
                &mut pb,
                &mut rng,
                &format!("dec{l}.fuse"),
                c,
                cfg.k_pairs,
                sc,
                cfg.fusion_mode,
            );
            let blocks = (0..cfg.n_d)
                .map(|i| {
                    ResBlock::new(&mut pb, &mut rng, &format!("dec{l}.rb{i}"), c, c0, cfg.k_pairs, sc)
                })
                .collect();
            let up = (l > 0)
                .then(|| CpUp::new(&mut pb, &mut rng, &format!("dec{l}.up"), c, cfg.k_pairs, sc));
            dec.push(DecLevel { fuse, blocks, up });
        }

        let tail_w = pb.param(
            "tail.w",
            Tensor4::zeros(Dims::new(cfg.out_channels, c0, 3, 3)),
            false,
        );
        let tail_b = pb.param(
            "tail.b",
            Tensor4::zeros(Dims::new(1, cfg.out_channels, 1, 1)),
            false,
        );
        Ok(UNet {
            cfg,
            head_w,
            head_b,
            time_mlp,
            enc,
            mid,
            dec,
            tail_w,
            tail_b,
            param_count: pb.count(),
        })
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    /// Predict the noise in `x_t` conditioned on the upscaled LR image.
    pub fn forward<E: Engine>(
        &self,
        eng: &mut E,
        x_t: &E::Val,
        y_up: &E::Val,
        tc: TimestepCtx,
    ) -> Result<E::Val> {
        Ok(self.forward_traced(eng, x_t, y_up, tc)?.0)
    }

    /// Forward pass that also returns the head-conv output and tail-conv
    /// input, for structural checks on the recorded graph.
    pub fn forward_traced<E: Engine>(
        &self,
        eng: &mut E,
        x_t: &E::Val,
        y_up: &E::Val,
        tc: TimestepCtx,
    ) -> Result<(E::Val, E::Val, E::Val)> {
        let dx = eng.dims(x_t);
        let dy = eng.dims(y_up);
        if dx != dy {
            return shape_err(format!("noise image {dx} vs conditioning image {dy}"));
        }
        if dx.c + dy.c != self.cfg.in_channels {
            return shape_err(format!(
                "inputs provide {} channels, head conv expects {}",
                dx.c + dy.c,
                self.cfg.in_channels
            ));
        }
        let m = self.cfg.resolution_multiple();
        if dx.h % m != 0 || dx.w % m != 0 {
            return shape_err(format!(
                "resolution {}x{} not divisible by {m}; pad to the next multiple of {m}",
                dx.h, dx.w
            ));
        }

        let t_em = self.time_mlp.forward(eng, tc.t, dx.n)?;
        let cat = eng.concat_c(x_t, y_up)?;
        let mut x = eng.conv2d(&cat, &self.head_w, Some(&self.head_b), 1, 1)?;
        let head_out = x.clone();

        let mut stash: Vec<E::Val> = Vec::with_capacity(self.cfg.levels);
        for level in &self.enc {
            for rb in &level.blocks {
                x = rb.forward(eng, &x, &t_em, tc)?;
            }
            stash.push(x.clone());
            if let Some(down) = &level.down {
                x = down.forward(eng, &x, tc)?;
            }
        }
        for rb in &self.mid {
            x = rb.forward(eng, &x, &t_em, tc)?;
        }
        for level in &self.dec {
            let skip = stash.pop().expect("one stashed skip per decoder level");
            x = level.fuse.forward(eng, &x, &skip, tc)?;
            for rb in &level.blocks {
                x = rb.forward(eng, &x, &t_em, tc)?;
            }
            if let Some(up) = &level.up {
                x = up.forward(eng, &x, tc)?;
            }
        }
        debug_assert!(stash.is_empty(), "every skip is consumed exactly once");
        let tail_in = x.clone();
        let eps = eng.conv2d(&x, &self.tail_w, Some(&self.tail_b), 1, 1)?;
        Ok((eps, head_out, tail_in))
    }

    pub fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.head_w);
        f(&self.head_b);
        self.time_mlp.visit_params(f);
        for level in &self.enc {
            for rb in &level.blocks {
                rb.visit_params(f);
            }
            if let Some(d) = &level.down {
                d.visit_params(f);
            }
        }
        for rb in &self.mid {
            rb.visit_params(f);
        }
        for level in &self.dec {
            level.fuse.visit_params(f);
            for rb in &level.blocks {
                rb.visit_params(f);
            }
            if let Some(u) = &level.up {
                u.visit_params(f);
            }
        }
        f(&self.tail_w);
        f(&self.tail_b);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.head_w);
        f(&mut self.head_b);
        self.time_mlp.visit_params_mut(f);
        for level in &mut self.enc {
            for rb in &mut level.blocks {
                rb.visit_params_mut(f);
            }
            if let Some(d) = &mut level.down {
                d.visit_params_mut(f);
            }
        }
        for rb in &mut self.mid {
            rb.visit_params_mut(f);
        }
        for level in &mut self.dec {
            level.fuse.visit_params_mut(f);
            for rb in &mut level.blocks {
                rb.visit_params_mut(f);
            }
            if let Some(u) = &mut level.up {
                u.visit_params_mut(f);
            }
        }
        f(&mut self.tail_w);
        f(&mut self.tail_b);
    }

    /// All parameters in visit order (the canonical checkpoint order).
    pub fn params(&self) -> Vec<&Param> {
        let mut v = Vec::with_capacity(self.param_count);
        self.visit_params(&mut |p| v.push(p));
        v
    }
}
