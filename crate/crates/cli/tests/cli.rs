//! End-to-end checks of the bisr binary: determinism contracts, file
//! formats, and exit codes.

use std::path::Path;
use std::process::Command;

fn bisr() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bisr"))
}

fn write_test_pngs(dir: &Path, n: u32, size: u32) {
    for k in 0..n {
        let img = image::RgbImage::from_fn(size, size, |x, y| {
            image::Rgb([
                ((x * (7 + k) + y) % 256) as u8,
                ((y * 13 + k * 31) % 256) as u8,
                ((x * y + k) % 256) as u8,
            ])
        });
        img.save(dir.join(format!("im{k}.png"))).unwrap();
    }
}

const TINY_CONFIG: &str = r#"{
  "unet": {"levels": 2, "n_e": 1, "n_d": 1, "base_channels": 8, "k_pairs": 2, "bottleneck_blocks": 1},
  "schedule": {"t_total": 40, "ddim_steps": 8},
  "train": {"batch_size": 1, "total_iters": 4, "crop_lr": 8, "scale": 2, "seed": 9}
}"#;

#[test]
fn train_then_sample_is_seed_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    std::fs::create_dir(&data).unwrap();
    write_test_pngs(&data, 2, 48);
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, TINY_CONFIG).unwrap();
    let ckpt = dir.path().join("m.ckpt");

    let run_train = |out: &Path| {
        let st = bisr()
            .args(["train", "--config"])
            .arg(&cfg)
            .arg("--data")
            .arg(&data)
            .arg("--out")
            .arg(out)
            .args(["--seed", "9"])
            .status()
            .unwrap();
        assert!(st.success());
    };
    run_train(&ckpt);
    let ckpt2 = dir.path().join("m2.ckpt");
    run_train(&ckpt2);
    // training is deterministic: identical checkpoints except their names
    let (a, b) = (std::fs::read(&ckpt).unwrap(), std::fs::read(&ckpt2).unwrap());
    assert_eq!(a, b);
    assert!(ckpt.with_extension("log.jsonl").exists());

    // LR input for sampling
    let lr = dir.path().join("lr.png");
    let img = image::open(data.join("im0.png")).unwrap().to_rgb8();
    image::imageops::resize(&img, 24, 24, image::imageops::FilterType::CatmullRom)
        .save(&lr)
        .unwrap();
    let sample = |out: &Path| {
        let st = bisr()
            .arg("sample")
            .arg("--ckpt")
            .arg(&ckpt)
            .arg("--lr")
            .arg(&lr)
            .args(["--steps", "8", "--seed", "5"])
            .arg("--out")
            .arg(out)
            .status()
            .unwrap();
        assert!(st.success());
    };
    let s1 = dir.path().join("sr1.png");
    let s2 = dir.path().join("sr2.png");
    sample(&s1);
    sample(&s2);
    assert_eq!(std::fs::read(&s1).unwrap(), std::fs::read(&s2).unwrap());
    let sr = image::open(&s1).unwrap().to_rgb8();
    assert_eq!(sr.dimensions(), (48, 48));

    // eval an image against itself: inf sentinel and SSIM 1.0
    let out = bisr()
        .arg("eval")
        .arg("--sr")
        .arg(&s1)
        .arg("--hr")
        .arg(&s1)
        .args(["--scale", "2"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["mean_psnr"], "inf");
    assert_eq!(v["mean_ssim"], 1.0);

    // hist writes one CSV per timestep
    let hist_dir = dir.path().join("hist");
    let st = bisr()
        .arg("hist")
        .arg("--ckpt")
        .arg(&ckpt)
        .arg("--lr")
        .arg(&lr)
        .args(["--timesteps", "10,40", "--layer", "mid.rb0.conv1", "--seed", "3"])
        .arg("--out")
        .arg(&hist_dir)
        .status()
        .unwrap();
    assert!(st.success());
    for t in [10, 40] {
        let text = std::fs::read_to_string(hist_dir.join(format!("hist_t{t}.csv"))).unwrap();
        assert!(text.starts_with("bin_left,count"));
        assert!(text.lines().count() > 10);
    }

    // unknown layer names fail with the available set listed
    let out = bisr()
        .arg("hist")
        .arg("--ckpt")
        .arg(&ckpt)
        .arg("--lr")
        .arg(&lr)
        .args(["--timesteps", "10", "--layer", "nope", "--seed", "3"])
        .arg("--out")
        .arg(&hist_dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("mid.rb0.conv1"));
}

#[test]
fn cost_reports_the_divisor_rules() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, TINY_CONFIG).unwrap();
    let out = bisr()
        .arg("cost")
        .arg("--config")
        .arg(&cfg)
        .args(["--size", "64"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let fp = v["params_fp"].as_f64().unwrap();
    let bin = v["params_bin_fp_equiv"].as_f64().unwrap();
    assert_eq!(v["params_total"].as_f64().unwrap(), fp + bin / 32.0);
    let ops_fp = v["ops_fp"].as_f64().unwrap();
    let ops_bin = v["ops_bin"].as_f64().unwrap();
    assert_eq!(v["ops_total"].as_f64().unwrap(), ops_fp + ops_bin / 64.0);
    assert!(v["layers"].as_array().unwrap().len() > 5);
}

#[test]
fn exit_codes_follow_the_error_classes() {
    // usage error: unknown flag
    let out = bisr().args(["sample", "--nonsense"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    // io error: missing checkpoint
    let out = bisr()
        .args(["sample", "--ckpt", "/nonexistent.ckpt", "--lr", "/nonexistent.png", "--out", "/tmp/x.png"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));

    // contract error: bad config json
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, "{ not json").unwrap();
    let out = bisr()
        .arg("cost")
        .arg("--config")
        .arg(&cfg)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("bad.json"), "{msg}");
}

#[test]
fn sample_rejects_unsupported_scales() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    std::fs::create_dir(&data).unwrap();
    write_test_pngs(&data, 1, 48);
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, TINY_CONFIG).unwrap();
    let ckpt = dir.path().join("m.ckpt");
    assert!(bisr()
        .arg("train")
        .arg("--config")
        .arg(&cfg)
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&ckpt)
        .args(["--seed", "1", "--iters", "1"])
        .status()
        .unwrap()
        .success());
    let out = bisr()
        .arg("sample")
        .arg("--ckpt")
        .arg(&ckpt)
        .arg("--lr")
        .arg(data.join("im0.png"))
        .args(["--scale", "3", "--steps", "4", "--seed", "1"])
        .arg("--out")
        .arg(dir.path().join("o.png"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("scale"));
}
