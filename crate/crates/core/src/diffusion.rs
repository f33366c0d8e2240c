//! Noise schedule, forward noising, training-pair construction, and the
//! DDIM sampler conditioned on the bicubically upscaled LR image.
//!
//! Images live in [-1, 1] inside the diffusion math. The schedule is linear
//! in beta; for schedule lengths other than the 2000-step default both
//! endpoints scale by 2000/T so the total noise mass (and hence the terminal
//! signal-to-noise ratio) stays fixed.

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::engine::{BinExec, EagerEngine, Engine};
use crate::error::{contract_err, numeric_err, Result};
use crate::imageio;
use crate::tensor::{Dims, Tensor4};
use crate::unet::UNet;

pub const DEFAULT_T: usize = 2000;
pub const DEFAULT_DDIM_STEPS: usize = 50;
const BETA_START_AT_DEFAULT_T: f64 = 1e-6;
const BETA_END_AT_DEFAULT_T: f64 = 1e-2;

fn default_t() -> usize {
    DEFAULT_T
}
fn default_steps() -> usize {
    DEFAULT_DDIM_STEPS
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    #[serde(default = "default_t")]
    pub t_total: usize,
    #[serde(default = "default_steps")]
    pub ddim_steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            t_total: DEFAULT_T,
            ddim_steps: DEFAULT_DDIM_STEPS,
        }
    }
}

/// beta/alpha/alpha-bar sequences plus the DDIM sub-sequence. Built in f64,
/// stored f32.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub t_total: usize,
    pub betas: Vec<f32>,
    pub alphas: Vec<f32>,
    pub alpha_bars: Vec<f32>,
    pub ddim_steps: usize,
    pub ddim_subsequence: Vec<usize>,
}

impl NoiseSchedule {
    pub fn new(cfg: ScheduleConfig) -> Result<Self> {
        let t_total = cfg.t_total;
        if t_total < 2 {
            return contract_err("schedule needs at least 2 timesteps".to_string());
        }
        if cfg.ddim_steps < 1 || cfg.ddim_steps > t_total {
            return contract_err(format!(
                "ddim steps {} outside [1, {t_total}]",
                cfg.ddim_steps
            ));
        }
        let scale = DEFAULT_T as f64 / t_total as f64;
        let b0 = BETA_START_AT_DEFAULT_T * scale;
        let b1 = BETA_END_AT_DEFAULT_T * scale;
        if b1 >= 1.0 {
            return numeric_err(format!("beta_end {b1} >= 1 at T = {t_total}"));
        }
        let mut betas = Vec::with_capacity(t_total);
        let mut alphas = Vec::with_capacity(t_total);
        let mut alpha_bars = Vec::with_capacity(t_total);
        let mut prod = 1.0f64;
        for t in 0..t_total {
            let beta = b0 + (b1 - b0) * t as f64 / (t_total - 1) as f64;
            prod *= 1.0 - beta;
            betas.push(beta as f32);
            alphas.push((1.0 - beta) as f32);
            alpha_bars.push(prod as f32);
        }
        let subsequence = ddim_subsequence(t_total, cfg.ddim_steps);
        Ok(NoiseSchedule {
            t_total,
            betas,
            alphas,
            alpha_bars,
            ddim_steps: cfg.ddim_steps,
            ddim_subsequence: subsequence,
        })
    }

    /// Cumulative signal fraction at step t (1-based); t = 0 returns 1.
    pub fn alpha_bar(&self, t: usize) -> f32 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }
}

/// Strictly increasing sub-sequence of `steps` timesteps ending at `t_total`.
/// With `t_total` divisible by `steps` the stride is uniform.
pub fn ddim_subsequence(t_total: usize, steps: usize) -> Vec<usize> {
    (1..=steps)
        .map(|k| (k * t_total).div_ceil(steps))
        .collect()
}

/// Closed-form forward noising: x_t = sqrt(a-bar) x0 + sqrt(1 - a-bar) eps.
pub fn q_sample(x0: &Tensor4, t: usize, eps: &Tensor4, sched: &NoiseSchedule) -> Result<Tensor4> {
    if t < 1 || t > sched.t_total {
        return contract_err(format!("timestep {t} outside [1, {}]", sched.t_total));
    }
    x0.same_dims(eps)?;
    let ab = sched.alpha_bar(t);
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(x, e)| sa * x + sb * e)
        .collect();
    Tensor4::from_vec(x0.dims(), data)
}

/// One DDIM update from t to t_prev. With eta = 0 the step is deterministic
/// and the rng is never consumed.
#[allow(clippy::too_many_arguments)]
pub fn ddim_step(
    x_t: &Tensor4,
    eps_pred: &Tensor4,
    t: usize,
    t_prev: usize,
    eta: f32,
    sched: &NoiseSchedule,
    rng: &mut ChaCha20Rng,
) -> Result<Tensor4> {
    if t_prev >= t || t > sched.t_total {
        return contract_err(format!("ddim step needs t > t_prev >= 0, got {t} -> {t_prev}"));
    }
    if eta < 0.0 {
        return contract_err(format!("eta must be >= 0, got {eta}"));
    }
    x_t.same_dims(eps_pred)?;
    let ab_t = sched.alpha_bar(t) as f64;
    let ab_p = sched.alpha_bar(t_prev) as f64;
    let sigma = eta as f64 * ((1.0 - ab_p) / (1.0 - ab_t)).sqrt() * (1.0 - ab_t / ab_p).sqrt();
    let dir_sq = 1.0 - ab_p - sigma * sigma;
    if dir_sq < 0.0 {
        return numeric_err(format!(
            "1 - alpha_bar(t_prev) - sigma^2 = {dir_sq} < 0; schedule misconfigured"
        ));
    }
    let inv_sqrt_ab_t = 1.0 / ab_t.sqrt() as f32;
    let noise_coef = (1.0 - ab_t).sqrt() as f32;
    let sqrt_ab_p = ab_p.sqrt() as f32;
    let dir_coef = dir_sq.sqrt() as f32;
    let sigma = sigma as f32;
    let mut data: Vec<f32> = x_t
        .data()
        .iter()
        .zip(eps_pred.data())
        .map(|(x, e)| {
            let x0_hat = (x - noise_coef * e) * inv_sqrt_ab_t;
            sqrt_ab_p * x0_hat + dir_coef * e
        })
        .collect();
    if eta > 0.0 {
        for v in data.iter_mut() {
            let z: f32 = StandardNormal.sample(rng);
            *v += sigma * z;
        }
    }
    Tensor4::from_vec(x_t.dims(), data)
}

/// Anything that predicts the noise in x_t given the conditioning image.
pub trait EpsModel {
    fn predict(&mut self, x_t: &Tensor4, y_up: &Tensor4, t: usize) -> Result<Tensor4>;
}

impl<F> EpsModel for F
where
    F: FnMut(&Tensor4, &Tensor4, usize) -> Result<Tensor4>,
{
    fn predict(&mut self, x_t: &Tensor4, y_up: &Tensor4, t: usize) -> Result<Tensor4> {
        self(x_t, y_up, t)
    }
}

/// UNet wrapper running eager forwards at a chosen binary execution mode.
pub struct UNetEps<'a> {
    pub net: &'a UNet,
    pub t_total: usize,
    pub bin_exec: BinExec,
}

impl EpsModel for UNetEps<'_> {
    fn predict(&mut self, x_t: &Tensor4, y_up: &Tensor4, t: usize) -> Result<Tensor4> {
        let mut eng = EagerEngine::new(self.bin_exec);
        let xv = eng.constant(x_t.clone())?;
        let yv = eng.constant(y_up.clone())?;
        let out = self.net.forward(
            &mut eng,
            &xv,
            &yv,
            crate::blocks::TimestepCtx {
                t,
                t_total: self.t_total,
            },
        )?;
        Ok((*out).clone())
    }
}

/// Deterministic RNG stream used everywhere randomness is seedable.
pub fn seed_rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

/// Gaussian tensor from a dedicated stream.
pub fn randn(dims: Dims, rng: &mut ChaCha20Rng) -> Tensor4 {
    let data = (0..dims.len())
        .map(|_| StandardNormal.sample(rng))
        .collect();
    Tensor4::from_vec(dims, data).expect("length matches dims")
}

/// Run the DDIM chain from pure noise down to the recovered image (in
/// [-1, 1], clamped). Every model query uses the true schedule timestep.
///
/// With `clamp_x0` the denoised estimate is clipped to the image range each
/// step and the noise estimate recomputed to match before the update; the
/// chain state then stays inside the distribution the network trained on.
pub fn sample_loop_opts(
    model: &mut dyn EpsModel,
    y_up: &Tensor4,
    sched: &NoiseSchedule,
    eta: f32,
    seed: u64,
    clamp_x0: bool,
) -> Result<Tensor4> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut x = randn(y_up.dims(), &mut rng);
    let sub = &sched.ddim_subsequence;
    for k in (0..sub.len()).rev() {
        let t = sub[k];
        let t_prev = if k > 0 { sub[k - 1] } else { 0 };
        let mut eps = model.predict(&x, y_up, t)?;
        if clamp_x0 {
            let ab = sched.alpha_bar(t) as f64;
            let (sa, sb) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
            let data = x
                .data()
                .iter()
                .zip(eps.data())
                .map(|(xt, e)| {
                    let x0 = ((xt - sb * e) / sa).clamp(-1.0, 1.0);
                    (xt - sa * x0) / sb
                })
                .collect();
            eps = Tensor4::from_vec(x.dims(), data)?;
        }
        x = ddim_step(&x, &eps, t, t_prev, eta, sched, &mut rng)?;
    }
    Ok(x.map(|v| v.clamp(-1.0, 1.0)))
}

pub fn sample_loop(
    model: &mut dyn EpsModel,
    y_up: &Tensor4,
    sched: &NoiseSchedule,
    eta: f32,
    seed: u64,
) -> Result<Tensor4> {
    sample_loop_opts(model, y_up, sched, eta, seed, true)
}

/// Options for [`sample_sr`].
#[derive(Debug, Clone, Copy)]
pub struct SampleOpts {
    pub eta: f32,
    pub seed: u64,
    pub bin_exec: BinExec,
}

/// Super-resolve an LR image: bicubic-upscale the conditioning image, pad to
/// the UNet's resolution multiple (reflection), run the sampler, crop back.
pub fn sample_sr(
    y_lr: &RgbImage,
    scale: usize,
    net: &UNet,
    sched: &NoiseSchedule,
    opts: SampleOpts,
) -> Result<RgbImage> {
    if scale != 2 && scale != 4 {
        return contract_err(format!("unsupported scale {scale}; expected 2 or 4"));
    }
    let (lw, lh) = y_lr.dimensions();
    let (hw, hh) = (lw * scale as u32, lh * scale as u32);
    let y_up_img = imageio::bicubic_resize(y_lr, hw, hh);
    let y_up = imageio::image_to_tensor(&y_up_img);
    let m = net.cfg.resolution_multiple();
    let pad_b = (m - (hh as usize % m)) % m;
    let pad_r = (m - (hw as usize % m)) % m;
    let y_pad = if pad_b > 0 || pad_r > 0 {
        imageio::reflect_pad(&y_up, pad_b, pad_r)?
    } else {
        y_up
    };
    let mut model = UNetEps {
        net,
        t_total: sched.t_total,
        bin_exec: opts.bin_exec,
    };
    let out = sample_loop(&mut model, &y_pad, sched, opts.eta, opts.seed)?;
    let out = imageio::crop(&out, hh as usize, hw as usize);
    imageio::tensor_to_image(&out)
}

/// One training example: noised HR crop, upscaled-LR conditioning, the
/// timestep, and the noise target.
pub struct TrainSample {
    pub x_t: Tensor4,
    pub y_up: Tensor4,
    pub t: usize,
    pub eps: Tensor4,
}

/// Apply one of the 8 dihedral augmentation variants (3 rotations x flip).
pub fn augment_variant(img: &RgbImage, rot: u8, flip: bool) -> RgbImage {
    let rotated = match rot % 4 {
        0 => img.clone(),
        1 => image::imageops::rotate90(img),
        2 => image::imageops::rotate180(img),
        _ => image::imageops::rotate270(img),
    };
    if flip {
        image::imageops::flip_horizontal(&rotated)
    } else {
        rotated
    }
}

/// Crop an aligned HR patch with augmentation applied, plus its derived LR
/// and upscaled-LR images.
pub fn crop_and_degrade(
    hr: &RgbImage,
    scale: usize,
    crop_lr: usize,
    rng: &mut ChaCha20Rng,
    augment: bool,
) -> Result<(RgbImage, RgbImage, RgbImage)> {
    let crop_hr = crop_lr * scale;
    let (w, h) = hr.dimensions();
    if (w as usize) < crop_hr || (h as usize) < crop_hr {
        return contract_err(format!(
            "image {w}x{h} smaller than the {crop_hr}x{crop_hr} HR crop"
        ));
    }
    let max_x = (w as usize - crop_hr) / scale;
    let max_y = (h as usize - crop_hr) / scale;
    let ox = (rng.random_range(0..=max_x) * scale) as u32;
    let oy = (rng.random_range(0..=max_y) * scale) as u32;
    let mut patch =
        image::imageops::crop_imm(hr, ox, oy, crop_hr as u32, crop_hr as u32).to_image();
    if augment {
        let rot = rng.random_range(0..4u8);
        let flip = rng.random::<bool>();
        patch = augment_variant(&patch, rot, flip);
    }
    let lr = imageio::bicubic_resize(&patch, crop_lr as u32, crop_lr as u32);
    let y_up = imageio::bicubic_resize(&lr, crop_hr as u32, crop_hr as u32);
    Ok((patch, lr, y_up))
}

/// Build one (x_t, y_up, t, eps) training pair from an HR image.
pub fn make_training_pair(
    hr: &RgbImage,
    scale: usize,
    crop_lr: usize,
    rng: &mut ChaCha20Rng,
    sched: &NoiseSchedule,
    augment: bool,
) -> Result<TrainSample> {
    let (patch, _lr, y_up) = crop_and_degrade(hr, scale, crop_lr, rng, augment)?;
    let x0 = imageio::image_to_tensor(&patch);
    let y_up = imageio::image_to_tensor(&y_up);
    let t = rng.random_range(1..=sched.t_total);
    let eps = randn(x0.dims(), rng);
    let x_t = q_sample(&x0, t, &eps, sched)?;
    Ok(TrainSample { x_t, y_up, t, eps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn sched(t: usize, steps: usize) -> NoiseSchedule {
        NoiseSchedule::new(ScheduleConfig {
            t_total: t,
            ddim_steps: steps,
        })
        .unwrap()
    }

    #[test]
    fn alpha_bar_is_strictly_decreasing_and_matches_the_product() {
        let s = sched(2000, 50);
        let mut prod = 1.0f64;
        for t in 1..=2000 {
            prod *= 1.0 - s.betas[t - 1] as f64;
            assert!((s.alpha_bar(t) as f64 - prod).abs() < 1e-6 * prod.max(1e-30));
            if t > 1 {
                assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            }
        }
        assert!(s.alpha_bar(1) > 0.999);
    }

    #[test]
    fn default_subsequence_has_uniform_stride_forty() {
        let s = sched(2000, 50);
        assert_eq!(s.ddim_subsequence.len(), 50);
        assert_eq!(*s.ddim_subsequence.last().unwrap(), 2000);
        for (k, &t) in s.ddim_subsequence.iter().enumerate() {
            assert_eq!(t, 40 * (k + 1));
        }
    }

    #[test]
    fn subsequence_is_strictly_increasing_for_awkward_lengths() {
        for (t_total, steps) in [(2000usize, 50usize), (200, 50), (177, 13), (10, 10)] {
            let sub = ddim_subsequence(t_total, steps);
            assert_eq!(sub.len(), steps);
            assert_eq!(*sub.last().unwrap(), t_total);
            for w in sub.windows(2) {
                assert!(w[0] < w[1], "{t_total}/{steps}: {sub:?}");
            }
        }
    }

    #[test]
    fn q_sample_boundary_algebra() {
        let mut s = sched(50, 10);
        // force exact boundary values into a copy of the schedule
        s.alpha_bars[2] = 1.0;
        s.alpha_bars[7] = 0.0;
        let x0 = Tensor4::from_vec(Dims::new(1, 1, 1, 3), vec![0.1, -0.5, 0.9]).unwrap();
        let eps = Tensor4::from_vec(Dims::new(1, 1, 1, 3), vec![1.0, 2.0, -1.0]).unwrap();
        assert_eq!(q_sample(&x0, 3, &eps, &s).unwrap().data(), x0.data());
        assert_eq!(q_sample(&x0, 8, &eps, &s).unwrap().data(), eps.data());
        assert!(q_sample(&x0, 0, &eps, &s).is_err());
        assert!(q_sample(&x0, 51, &eps, &s).is_err());
    }

    #[test]
    fn q_sample_variance_matches_one_minus_alpha_bar() {
        let s = sched(2000, 50);
        let t = 1000;
        let want = 1.0 - s.alpha_bar(t) as f64;
        let n = 100_000usize;
        let mut rng = ChaCha20Rng::seed_from_u64(42);
        let x0 = Tensor4::zeros(Dims::new(1, 1, 1, n));
        let eps = randn(Dims::new(1, 1, 1, n), &mut rng);
        let xt = q_sample(&x0, t, &eps, &s).unwrap();
        let mean: f64 = xt.data().iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        let var: f64 = xt
            .data()
            .iter()
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / (n - 1) as f64;
        // 3 sigma of the variance estimator: var * sqrt(2/(n-1))
        let tol = 3.0 * want * (2.0 / (n - 1) as f64).sqrt();
        assert!((var - want).abs() < tol, "var {var} vs {want} (tol {tol})");
    }

    #[test]
    fn ddim_recovers_x0_when_given_the_true_noise() {
        let s = sched(2000, 50);
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let x0 = randn(Dims::new(1, 2, 3, 3), &mut rng);
        let eps = randn(Dims::new(1, 2, 3, 3), &mut rng);
        let t = 1234;
        let xt = q_sample(&x0, t, &eps, &s).unwrap();
        let back = ddim_step(&xt, &eps, t, 0, 0.0, &s, &mut rng).unwrap();
        for (a, b) in back.data().iter().zip(x0.data()) {
            assert!((a - b).abs() < 2e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn eta_zero_trajectory_is_bit_deterministic() {
        let s = sched(200, 50);
        let y = Tensor4::zeros(Dims::new(1, 3, 8, 8));
        let mut oracle = |x: &Tensor4, _y: &Tensor4, _t: usize| Ok(x.scaled(0.5));
        let a = sample_loop(&mut oracle, &y, &s, 0.0, 99).unwrap();
        let mut oracle2 = |x: &Tensor4, _y: &Tensor4, _t: usize| Ok(x.scaled(0.5));
        let b = sample_loop(&mut oracle2, &y, &s, 0.0, 99).unwrap();
        let bits = |t: &Tensor4| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn planted_trajectory_recovers_the_target() {
        // An oracle that always reports the exact noise between the current
        // x and a planted x0 makes the 50-step chain land on x0.
        let s = sched(2000, 50);
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let planted = randn(Dims::new(1, 3, 4, 4), &mut rng).map(|v| v.clamp(-1.0, 1.0) * 0.9);
        let p = planted.clone();
        let mut oracle = move |x: &Tensor4, _y: &Tensor4, t: usize| {
            let ss = sched(2000, 50);
            let ab = ss.alpha_bar(t);
            let data = x
                .data()
                .iter()
                .zip(p.data())
                .map(|(xt, x0)| (xt - ab.sqrt() * x0) / (1.0 - ab).sqrt())
                .collect();
            Tensor4::from_vec(x.dims(), data)
        };
        let y = Tensor4::zeros(Dims::new(1, 3, 4, 4));
        let out = sample_loop(&mut oracle, &y, &s, 0.0, 11).unwrap();
        for (a, b) in out.data().iter().zip(planted.data()) {
            assert!((a - b).abs() < 1e-3, "{a} vs {b}");
        }
    }

    #[test]
    fn augmentation_has_exactly_eight_distinct_variants() {
        let img = RgbImage::from_fn(6, 6, |x, y| {
            image::Rgb([(x * 40 + y) as u8, (y * 31) as u8, (x * 7 + y * y) as u8])
        });
        let mut seen = HashSet::new();
        for rot in 0..4 {
            for flip in [false, true] {
                let v = augment_variant(&img, rot, flip);
                seen.insert(v.into_raw());
            }
        }
        assert_eq!(seen.len(), 8);
    }

    #[test]
    fn training_pair_shapes_for_scale_two() {
        let hr = RgbImage::from_fn(160, 160, |x, y| {
            image::Rgb([(x % 256) as u8, (y % 256) as u8, ((x * y) % 256) as u8])
        });
        let s = sched(200, 50);
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let pair = make_training_pair(&hr, 2, 64, &mut rng, &s, true).unwrap();
        assert_eq!(pair.x_t.dims(), Dims::new(1, 3, 128, 128));
        assert_eq!(pair.y_up.dims(), Dims::new(1, 3, 128, 128));
        assert!(pair.t >= 1 && pair.t <= 200);
        assert_eq!(pair.eps.dims(), pair.x_t.dims());
    }

    #[test]
    fn undersized_image_is_a_contract_error() {
        let hr = RgbImage::new(100, 100);
        let s = sched(200, 50);
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        assert!(make_training_pair(&hr, 2, 64, &mut rng, &s, false).is_err());
    }
}
