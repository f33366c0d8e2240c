//! L1 noise-prediction training: Adam over the full-precision latent
//! parameters, a deterministic single-worker loop, and line-delimited JSON
//! progress records.

use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::TimestepCtx;
use crate::diffusion::{crop_and_degrade, q_sample, randn, NoiseSchedule};
use crate::engine::ParamId;
use crate::error::{contract_err, numeric_err, Error, Result};
use crate::imageio;
use crate::kernels;
use crate::tape::TapeEngine;
use crate::tensor::{Dims, Tensor4};
use crate::unet::UNet;

fn default_batch() -> usize {
    2
}
fn default_lr() -> f32 {
    1e-4
}
fn default_crop() -> usize {
    64
}
fn default_scale() -> usize {
    2
}
fn default_iters() -> usize {
    1000
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_iters")]
    pub total_iters: usize,
    #[serde(default = "default_lr")]
    pub lr: f32,
    /// LR-pixel crop size; the HR crop is crop * scale.
    #[serde(default = "default_crop")]
    pub crop_lr: usize,
    #[serde(default = "default_scale")]
    pub scale: usize,
    #[serde(default)]
    pub seed: u64,
    /// 0 disables intermediate checkpoints.
    #[serde(default)]
    pub checkpoint_every: usize,
    /// Global-norm gradient clip; off by default.
    #[serde(default)]
    pub clip_grad_norm: Option<f32>,
    #[serde(default = "default_true")]
    pub augment: bool,
}

fn default_true() -> bool {
    true
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 2,
            total_iters: 1000,
            lr: 1e-4,
            crop_lr: 64,
            scale: 2,
            seed: 0,
            checkpoint_every: 0,
            clip_grad_norm: None,
            augment: true,
        }
    }
}

/// Mean absolute difference between prediction and target.
pub fn l1_loss(pred: &Tensor4, target: &Tensor4) -> Result<f32> {
    kernels::l1_fwd(pred, target)
}

/// Bias-corrected Adam. Parameters whose gradient is absent in a step are
/// skipped entirely (their moments do not decay), so the momentarily unused
/// bank pairs stay untouched.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    pub step_count: u64,
    slots: Vec<Option<MomentSlot>>,
}

#[derive(Debug, Clone)]
struct MomentSlot {
    m: Vec<f32>,
    v: Vec<f32>,
    steps: u64,
}

impl OptimizerState {
    pub fn new(lr: f32, param_count: usize) -> Self {
        OptimizerState {
            lr,
            beta1: 0.9,
            beta2: 0.99,
            epsilon: 1e-8,
            step_count: 0,
            slots: vec![None; param_count],
        }
    }

    /// In-place Adam update of one parameter's data.
    pub fn step_param(&mut self, idx: usize, name: &str, data: &mut [f32], grad: &[f32]) -> Result<()> {
        if data.len() != grad.len() {
            return contract_err(format!(
                "{name}: gradient length {} vs parameter length {}",
                grad.len(),
                data.len()
            ));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return numeric_err(format!("non-finite gradient for parameter {name}"));
        }
        let slot = self.slots[idx].get_or_insert_with(|| MomentSlot {
            m: vec![0.0; data.len()],
            v: vec![0.0; data.len()],
            steps: 0,
        });
        slot.steps += 1;
        let t = slot.steps as f64;
        let bc1 = 1.0 - (self.beta1 as f64).powf(t);
        let bc2 = 1.0 - (self.beta2 as f64).powf(t);
        let (b1, b2) = (self.beta1, self.beta2);
        for ((p, g), (m, v)) in data
            .iter_mut()
            .zip(grad)
            .zip(slot.m.iter_mut().zip(slot.v.iter_mut()))
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m as f64 / bc1;
            let v_hat = *v as f64 / bc2;
            *p -= (self.lr as f64 * m_hat / (v_hat.sqrt() + self.epsilon as f64)) as f32;
        }
        Ok(())
    }

    /// Apply one optimizer step to every parameter with a gradient.
    pub fn apply(&mut self, net: &mut UNet, grads: &HashMap<ParamId, Tensor4>) -> Result<()> {
        self.step_count += 1;
        let mut result = Ok(());
        net.visit_params_mut(&mut |p| {
            if result.is_err() {
                return;
            }
            if let Some(g) = grads.get(&p.id) {
                let idx = p.id.0;
                let name = p.name.clone();
                if let Err(e) = {
                    let data = p.tensor_mut().data_mut();
                    self.step_param(idx, &name, data, g.data())
                } {
                    result = Err(e);
                }
            }
        });
        result
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct IterRecord {
    pub iter: usize,
    pub loss: f32,
    pub lr: f32,
    pub seconds: f64,
}

/// One training step on an explicit batch. Returns the loss.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    net: &mut UNet,
    opt: &mut OptimizerState,
    x_t: &Tensor4,
    y_up: &Tensor4,
    t: usize,
    eps_target: &Tensor4,
    t_total: usize,
    clip_grad_norm: Option<f32>,
) -> Result<f32> {
    let mut tape = TapeEngine::new();
    let xv = tape.leaf(x_t.clone(), false)?;
    let yv = tape.leaf(y_up.clone(), false)?;
    let target = tape.leaf(eps_target.clone(), false)?;
    let pred = net.forward(&mut tape, &xv, &yv, TimestepCtx { t, t_total })?;
    let loss_id = tape.l1_loss(pred, target)?;
    let loss = tape.value(loss_id).data()[0];
    if !loss.is_finite() {
        return numeric_err(format!(
            "loss became non-finite at t={t} (x_t range [{:.3}, {:.3}])",
            x_t.data().iter().cloned().fold(f32::INFINITY, f32::min),
            x_t.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max),
        ));
    }
    tape.backward(loss_id)?;
    let mut grads: HashMap<ParamId, Tensor4> = tape
        .param_grads()
        .into_iter()
        .map(|(pid, g)| (pid, g.clone()))
        .collect();
    if let Some(max_norm) = clip_grad_norm {
        let total: f64 = grads
            .values()
            .flat_map(|g| g.data().iter())
            .map(|&v| (v as f64) * (v as f64))
            .sum();
        let norm = total.sqrt() as f32;
        if norm > max_norm {
            let scale = max_norm / norm;
            for g in grads.values_mut() {
                *g = g.scaled(scale);
            }
        }
    }
    opt.apply(net, &grads)?;
    Ok(loss)
}

/// Stack per-sample tensors along the batch axis.
fn stack(batch: &[Tensor4]) -> Result<Tensor4> {
    let d = batch[0].dims();
    let out_d = Dims::new(batch.len() * d.n, d.c, d.h, d.w);
    let mut data = Vec::with_capacity(out_d.len());
    for t in batch {
        t.same_dims(&batch[0])?;
        data.extend_from_slice(t.data());
    }
    Tensor4::from_vec(out_d, data)
}

/// Draw one batch: a single shared timestep (the network conditions on one
/// t per pass) and per-sample crops, augmentations, and noises.
pub fn make_training_batch(
    images: &[RgbImage],
    cfg: &TrainConfig,
    rng: &mut ChaCha20Rng,
    sched: &NoiseSchedule,
) -> Result<(Tensor4, Tensor4, usize, Tensor4)> {
    let t = rng.random_range(1..=sched.t_total);
    let mut x0s = Vec::with_capacity(cfg.batch_size);
    let mut yups = Vec::with_capacity(cfg.batch_size);
    let mut epss = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let img = &images[rng.random_range(0..images.len())];
        let (patch, _lr, y_up) = crop_and_degrade(img, cfg.scale, cfg.crop_lr, rng, cfg.augment)?;
        let x0 = imageio::image_to_tensor(&patch);
        let eps = randn(x0.dims(), rng);
        x0s.push(x0);
        yups.push(imageio::image_to_tensor(&y_up));
        epss.push(eps);
    }
    let x0 = stack(&x0s)?;
    let eps = stack(&epss)?;
    let y_up = stack(&yups)?;
    let x_t = q_sample(&x0, t, &eps, sched)?;
    Ok((x_t, y_up, t, eps))
}

/// Full training loop over in-memory images. `on_iter` sees every record;
/// checkpoints are written through `save_ckpt` when configured.
#[allow(clippy::too_many_arguments)]
pub fn train_loop(
    net: &mut UNet,
    images: &[RgbImage],
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
    mut save_ckpt: impl FnMut(&UNet, usize) -> Result<()>,
    mut on_iter: impl FnMut(&IterRecord),
) -> Result<Vec<IterRecord>> {
    if images.is_empty() {
        return Err(Error::Io("no training images".to_string()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut opt = OptimizerState::new(cfg.lr, net.param_count());
    let mut log = Vec::with_capacity(cfg.total_iters);
    let start = Instant::now();
    for iter in 1..=cfg.total_iters {
        let (x_t, y_up, t, eps) = make_training_batch(images, cfg, &mut rng, sched)?;
        let loss = train_step(
            net,
            &mut opt,
            &x_t,
            &y_up,
            t,
            &eps,
            sched.t_total,
            cfg.clip_grad_norm,
        )?;
        let rec = IterRecord {
            iter,
            loss,
            lr: cfg.lr,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_iter(&rec);
        log.push(rec);
        if cfg.checkpoint_every > 0 && iter % cfg.checkpoint_every == 0 {
            save_ckpt(net, iter)?;
        }
    }
    Ok(log)
}

/// Load every decodable RGB image in a directory (sorted by filename).
pub fn load_image_dir(dir: &Path) -> Result<Vec<RgbImage>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    let mut images = Vec::new();
    for p in paths {
        match imageio::load_png(&p) {
            Ok(img) => images.push(img),
            Err(e) => eprintln!("warning: skipping {}: {e}", p.display()),
        }
    }
    if images.is_empty() {
        return Err(Error::Io(format!(
            "{}: no readable RGB images",
            dir.display()
        )));
    }
    Ok(images)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::ScheduleConfig;
    use crate::unet::UNetConfig;

    #[test]
    fn l1_loss_basics() {
        let a = Tensor4::filled(Dims::new(1, 1, 2, 2), 0.5);
        let b = Tensor4::filled(Dims::new(1, 1, 2, 2), -0.5);
        assert_eq!(l1_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(l1_loss(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn adam_zero_gradient_leaves_fresh_params_unchanged() {
        let mut opt = OptimizerState::new(0.1, 1);
        let mut data = vec![1.0f32, -2.0, 3.0];
        let grad = vec![0.0f32; 3];
        opt.step_param(0, "p", &mut data, &grad).unwrap();
        assert_eq!(data, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn adam_first_step_moves_by_about_lr() {
        let mut opt = OptimizerState::new(0.01, 1);
        let mut data = vec![0.0f32];
        opt.step_param(0, "p", &mut data, &[1.0]).unwrap();
        assert!((data[0] + 0.01).abs() < 1e-6, "{}", data[0]);
    }

    #[test]
    fn adam_converges_on_a_scalar_quadratic() {
        let mut opt = OptimizerState::new(1e-2, 1);
        let mut p = vec![0.0f32];
        for _ in 0..5000 {
            let g = 2.0 * (p[0] - 3.0);
            opt.step_param(0, "p", &mut p, &[g]).unwrap();
            if (p[0] - 3.0).abs() < 1e-2 {
                break;
            }
        }
        assert!((p[0] - 3.0).abs() < 1e-2, "ended at {}", p[0]);
    }

    #[test]
    fn adam_rejects_non_finite_gradients_by_name() {
        let mut opt = OptimizerState::new(1e-2, 1);
        let mut p = vec![0.0f32];
        let err = opt.step_param(0, "enc0.rb0.conv1.w", &mut p, &[f32::NAN]).unwrap_err();
        assert!(err.to_string().contains("enc0.rb0.conv1.w"));
    }

    fn tiny_setup() -> (UNet, NoiseSchedule, Vec<RgbImage>, TrainConfig) {
        let net = UNet::new(
            UNetConfig {
                levels: 2,
                n_e: 1,
                n_d: 1,
                base_channels: 8,
                k_pairs: 2,
                bottleneck_blocks: 1,
                ..Default::default()
            },
            42,
        )
        .unwrap();
        let sched = NoiseSchedule::new(ScheduleConfig {
            t_total: 50,
            ddim_steps: 10,
        })
        .unwrap();
        let imgs = vec![RgbImage::from_fn(64, 64, |x, y| {
            image::Rgb([
                ((x * 4) % 256) as u8,
                ((y * 4) % 256) as u8,
                ((x * y) % 256) as u8,
            ])
        })];
        let cfg = TrainConfig {
            batch_size: 2,
            total_iters: 3,
            crop_lr: 16,
            scale: 2,
            seed: 7,
            ..Default::default()
        };
        (net, sched, imgs, cfg)
    }

    #[test]
    fn two_runs_with_one_seed_match_bit_for_bit() {
        let (net, sched, imgs, cfg) = tiny_setup();
        let run = |mut net: UNet| -> Vec<u32> {
            let log = train_loop(&mut net, &imgs, &cfg, &sched, |_, _| Ok(()), |_| {}).unwrap();
            log.iter().map(|r| r.loss.to_bits()).collect()
        };
        let a = run(net.clone());
        let b = run(net);
        assert_eq!(a, b);
    }

    #[test]
    fn bank_coverage_grows_over_many_steps() {
        let (mut net, sched, imgs, mut cfg) = tiny_setup();
        cfg.total_iters = 40;
        // track which bias parameters move away from zero
        train_loop(&mut net, &imgs, &cfg, &sched, |_, _| Ok(()), |_| {}).unwrap();
        let mut touched = 0usize;
        let mut total = 0usize;
        net.visit_params(&mut |p| {
            if p.name.contains(".bias") {
                total += 1;
                if p.tensor().data().iter().any(|&v| v != 0.0) {
                    touched += 1;
                }
            }
        });
        assert!(total > 0);
        assert_eq!(touched, total, "all {total} bank biases should be updated eventually");
    }

    #[test]
    fn frozen_batch_loss_is_mostly_non_increasing() {
        let (mut net, sched, imgs, cfg) = tiny_setup();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let (x_t, y_up, t, eps) = make_training_batch(&imgs, &cfg, &mut rng, &sched).unwrap();
        let mut opt = OptimizerState::new(1e-4, net.param_count());
        let mut losses = Vec::new();
        for _ in 0..50 {
            let l = train_step(&mut net, &mut opt, &x_t, &y_up, t, &eps, sched.t_total, None)
                .unwrap();
            losses.push(l);
        }
        let increases = losses.windows(2).filter(|w| w[1] > w[0]).count();
        assert!(increases <= 5, "{increases} increasing steps: {losses:?}");
    }
}
