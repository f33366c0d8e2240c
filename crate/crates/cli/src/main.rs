//! bisr command line: train, sample, eval, cost, hist.
//!
//! Exit codes: 2 usage/contract errors, 3 I/O, 4 numeric failures.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use bisr_core::ckpt::{load_model, save_model, CheckpointMeta};
use bisr_core::cost::count_cost;
use bisr_core::diffusion::{q_sample, randn, sample_sr, NoiseSchedule, SampleOpts, ScheduleConfig};
use bisr_core::engine::{BinExec, EagerEngine, Engine};
use bisr_core::error::Error;
use bisr_core::imageio::{image_to_tensor, load_png, save_png};
use bisr_core::metrics::{psnr_y, ssim_y};
use bisr_core::train::{load_image_dir, train_loop, TrainConfig};
use bisr_core::unet::{UNet, UNetConfig};

#[derive(Parser)]
#[command(name = "bisr", version, about = "1-bit diffusion super-resolution engine")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model on a directory of RGB images.
    Train(TrainArgs),
    /// Super-resolve an LR image with a trained checkpoint.
    Sample(SampleArgs),
    /// Y-channel PSNR/SSIM between SR results and ground truth.
    Eval(EvalArgs),
    /// Params/OPs report for a model configuration.
    Cost(CostArgs),
    /// Per-timestep activation histograms at a named layer.
    Hist(HistArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// JSON config file ({"unet": .., "schedule": .., "train": ..}).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory of training images.
    #[arg(long)]
    data: PathBuf,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Training log (line-delimited JSON); defaults to <out>.log.jsonl.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    scale: Option<usize>,
    /// LR crop size in pixels.
    #[arg(long)]
    crop: Option<usize>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Low-resolution input PNG.
    #[arg(long)]
    lr: PathBuf,
    /// Upscale factor; defaults to the factor the checkpoint was trained for.
    #[arg(long)]
    scale: Option<usize>,
    /// DDIM steps.
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long, default_value_t = 0.0)]
    eta: f32,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// SR image or directory.
    #[arg(long)]
    sr: PathBuf,
    /// Ground-truth image or directory.
    #[arg(long)]
    hr: PathBuf,
    /// Upscale factor; sets the border crop.
    #[arg(long, default_value_t = 2)]
    scale: usize,
}

#[derive(Args)]
struct CostArgs {
    /// JSON config file; defaults to the stock configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output height/width the forward pass is counted at.
    #[arg(long, default_value_t = 256)]
    size: usize,
}

#[derive(Args)]
struct HistArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    lr: PathBuf,
    /// Comma-separated timesteps, e.g. 40,1000,2000.
    #[arg(long, value_delimiter = ',')]
    timesteps: Vec<usize>,
    /// Layer name (a binarized conv block, e.g. dec0.rb1.conv2).
    #[arg(long)]
    layer: String,
    #[arg(long, default_value_t = 64)]
    bins: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for hist_t<t>.csv files.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct ConfigFile {
    #[serde(default)]
    unet: UNetConfig,
    #[serde(default)]
    schedule: ScheduleConfig,
    #[serde(default)]
    train: TrainConfig,
}

fn load_config(path: Option<&Path>) -> Result<ConfigFile, Error> {
    match path {
        None => Ok(ConfigFile {
            unet: UNetConfig::default(),
            schedule: ScheduleConfig::default(),
            train: TrainConfig::default(),
        }),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Io(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Contract(format!("{}: bad config: {e}", p.display())))
        }
    }
}

fn resolve_seed(flag: Option<u64>) -> u64 {
    match flag {
        Some(s) => s,
        None => {
            let s: u64 = rand::random();
            eprintln!("no --seed given; using seed {s} (pass --seed {s} to reproduce)");
            s
        }
    }
}

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Io(_) => 3,
        Error::Numeric(_) => 4,
        Error::Shape(_) | Error::Contract(_) => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Train(a) => cmd_train(a),
        Cmd::Sample(a) => cmd_sample(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Cost(a) => cmd_cost(a),
        Cmd::Hist(a) => cmd_hist(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn cmd_train(a: TrainArgs) -> Result<(), Error> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(v) = a.iters {
        cfg.train.total_iters = v;
    }
    if let Some(v) = a.lr {
        cfg.train.lr = v;
    }
    if let Some(v) = a.batch {
        cfg.train.batch_size = v;
    }
    if let Some(v) = a.scale {
        cfg.train.scale = v;
    }
    if let Some(v) = a.crop {
        cfg.train.crop_lr = v;
    }
    cfg.train.seed = resolve_seed(a.seed.or(Some(cfg.train.seed)));
    let images = load_image_dir(&a.data)?;
    eprintln!(
        "training on {} images: {} iters, batch {}, lr {}, x{} crop {}",
        images.len(),
        cfg.train.total_iters,
        cfg.train.batch_size,
        cfg.train.lr,
        cfg.train.scale,
        cfg.train.crop_lr
    );
    let sched = NoiseSchedule::new(cfg.schedule)?;
    let mut net = UNet::new(cfg.unet.clone(), cfg.train.seed)?;
    let log_path = a
        .log
        .clone()
        .unwrap_or_else(|| a.out.with_extension("log.jsonl"));
    let mut log_file = std::fs::File::create(&log_path)
        .map_err(|e| Error::Io(format!("{}: {e}", log_path.display())))?;
    let meta_for = |step: u64| CheckpointMeta {
        unet: cfg.unet.clone(),
        schedule: cfg.schedule,
        train_step: step,
        scale: cfg.train.scale as u32,
        seed: cfg.train.seed,
    };
    let progress_every = (cfg.train.total_iters / 20).max(1);
    let out_path = a.out.clone();
    let total = cfg.train.total_iters;
    train_loop(
        &mut net,
        &images,
        &cfg.train,
        &sched,
        |net, iter| save_model(&out_path, net, &meta_for(iter as u64)),
        |rec| {
            if let Ok(line) = serde_json::to_string(rec) {
                let _ = writeln!(log_file, "{line}");
            }
            if rec.iter % progress_every == 0 || rec.iter == total {
                eprintln!(
                    "iter {}/{} loss {:.4} ({:.1}s)",
                    rec.iter, total, rec.loss, rec.seconds
                );
            }
        },
    )?;
    save_model(&a.out, &net, &meta_for(cfg.train.total_iters as u64))?;
    eprintln!("checkpoint written to {}", a.out.display());
    Ok(())
}

fn cmd_sample(a: SampleArgs) -> Result<(), Error> {
    let (net, meta) = load_model(&a.ckpt)?;
    let scale = a.scale.unwrap_or(meta.scale as usize);
    let mut sched_cfg = meta.schedule;
    sched_cfg.ddim_steps = a.steps;
    let sched = NoiseSchedule::new(sched_cfg)?;
    let seed = resolve_seed(a.seed);
    let lr_img = load_png(&a.lr)?;
    let out = sample_sr(
        &lr_img,
        scale,
        &net,
        &sched,
        SampleOpts {
            eta: a.eta,
            seed,
            bin_exec: BinExec::Bits,
        },
    )?;
    save_png(&a.out, &out)?;
    eprintln!(
        "wrote {} ({}x{} -> {}x{})",
        a.out.display(),
        lr_img.width(),
        lr_img.height(),
        out.width(),
        out.height()
    );
    Ok(())
}

fn image_list(path: &Path) -> Result<Vec<PathBuf>, Error> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut v: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    v.sort();
    Ok(v)
}

fn json_db(v: f64) -> serde_json::Value {
    if v.is_infinite() {
        serde_json::Value::String("inf".to_string())
    } else {
        serde_json::json!((v * 1e4).round() / 1e4)
    }
}

fn cmd_eval(a: EvalArgs) -> Result<(), Error> {
    let sr = image_list(&a.sr)?;
    let hr = image_list(&a.hr)?;
    if sr.len() != hr.len() || sr.is_empty() {
        return Err(Error::Contract(format!(
            "need matching non-empty image sets, got {} SR vs {} HR",
            sr.len(),
            hr.len()
        )));
    }
    let mut rows = Vec::new();
    let mut psnr_sum = 0.0;
    let mut ssim_sum = 0.0;
    let mut finite = 0usize;
    for (s, h) in sr.iter().zip(&hr) {
        let si = load_png(s)?;
        let hi = load_png(h)?;
        let p = psnr_y(&si, &hi, a.scale)?;
        let ss = ssim_y(&si, &hi)?;
        if p.is_finite() {
            psnr_sum += p;
            finite += 1;
        }
        ssim_sum += ss;
        rows.push(serde_json::json!({
            "name": s.file_name().map(|n| n.to_string_lossy().to_string()).unwrap_or_default(),
            "psnr": json_db(p),
            "ssim": (ss * 1e6).round() / 1e6,
        }));
    }
    let mean_psnr = if finite == rows.len() {
        json_db(psnr_sum / rows.len() as f64)
    } else if finite == 0 {
        json_db(f64::INFINITY)
    } else {
        // mixed finite/infinite set: report the finite mean
        json_db(psnr_sum / finite as f64)
    };
    let out = serde_json::json!({
        "images": rows,
        "mean_psnr": mean_psnr,
        "mean_ssim": (ssim_sum / sr.len() as f64 * 1e6).round() / 1e6,
    });
    println!("{}", serde_json::to_string_pretty(&out).unwrap());
    Ok(())
}

fn cmd_cost(a: CostArgs) -> Result<(), Error> {
    let cfg = load_config(a.config.as_deref())?;
    let net = UNet::new(cfg.unet, 0)?;
    let report = count_cost(&net, a.size, a.size)?;
    eprintln!("{}", report.human_table());
    println!("{}", serde_json::to_string_pretty(&report).unwrap());
    Ok(())
}

fn cmd_hist(a: HistArgs) -> Result<(), Error> {
    let (net, meta) = load_model(&a.ckpt)?;
    if a.timesteps.is_empty() {
        return Err(Error::Contract("no timesteps given".to_string()));
    }
    let sched = NoiseSchedule::new(meta.schedule)?;
    let layer_names: Vec<String> = net
        .params()
        .iter()
        .filter(|p| p.binarized)
        .map(|p| p.name.trim_end_matches(".w").to_string())
        .collect();
    if !layer_names.iter().any(|n| n == &a.layer) {
        return Err(Error::Contract(format!(
            "layer '{}' not found; binarized conv blocks are: {}",
            a.layer,
            layer_names.join(", ")
        )));
    }
    let seed = resolve_seed(a.seed);
    let lr_img = load_png(&a.lr)?;
    let scale = meta.scale as usize;
    let (lw, lh) = lr_img.dimensions();
    let up = bisr_core::imageio::bicubic_resize(&lr_img, lw * scale as u32, lh * scale as u32);
    let y_up = image_to_tensor(&up);
    let m = net.cfg.resolution_multiple();
    let d = y_up.dims();
    let y_up = bisr_core::imageio::reflect_pad(
        &y_up,
        (m - d.h % m) % m,
        (m - d.w % m) % m,
    )?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::Io(format!("{}: {e}", a.out.display())))?;
    let mut rng = bisr_core::diffusion::seed_rng(seed);
    for &t in &a.timesteps {
        // stand-in state: the conditioning image noised to level t
        let eps = randn(y_up.dims(), &mut rng);
        let x_t = q_sample(&y_up, t, &eps, &sched)?;
        let mut eng = EagerEngine::new(BinExec::Bits);
        eng.watch(&a.layer);
        let xv = eng.constant(x_t)?;
        let yv = eng.constant(y_up.clone())?;
        net.forward(
            &mut eng,
            &xv,
            &yv,
            bisr_core::blocks::TimestepCtx {
                t,
                t_total: sched.t_total,
            },
        )?;
        let obs = eng.take_observations();
        if obs.is_empty() {
            return Err(Error::Contract(format!(
                "layer '{}' produced no observations",
                a.layer
            )));
        }
        let values = &obs[0];
        let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
        for &v in values.data() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let span = (hi - lo).max(1e-12);
        let mut counts = vec![0u64; a.bins];
        for &v in values.data() {
            let idx = (((v - lo) / span) * a.bins as f32) as usize;
            counts[idx.min(a.bins - 1)] += 1;
        }
        let path = a.out.join(format!("hist_t{t}.csv"));
        let mut f = std::fs::File::create(&path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        writeln!(f, "bin_left,count").map_err(|e| Error::Io(e.to_string()))?;
        for (i, c) in counts.iter().enumerate() {
            let left = lo + span * i as f32 / a.bins as f32;
            writeln!(f, "{left},{c}").map_err(|e| Error::Io(e.to_string()))?;
        }
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}
