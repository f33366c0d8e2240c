//! Y-channel PSNR and SSIM on studio-swing BT.601 luminance, the convention
//! the super-resolution benchmarks use.

use image::RgbImage;

use crate::error::{contract_err, Result};

/// Studio-swing BT.601 luma of one pixel: Y = 16 + 65.481 R + 128.553 G +
/// 24.966 B with R,G,B in [0, 1]. Result lies in [16, 235].
#[inline]
pub fn luma_y(r: u8, g: u8, b: u8) -> f64 {
    16.0 + (65.481 * r as f64 + 128.553 * g as f64 + 24.966 * b as f64) / 255.0
}

fn y_plane(img: &RgbImage, crop: usize) -> Result<(Vec<f64>, usize, usize)> {
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    if w <= 2 * crop || h <= 2 * crop {
        return contract_err(format!("border crop {crop} leaves no pixels of {w}x{h}"));
    }
    let (cw, ch) = (w - 2 * crop, h - 2 * crop);
    let mut y = Vec::with_capacity(cw * ch);
    for yy in crop..h - crop {
        for xx in crop..w - crop {
            let p = img.get_pixel(xx as u32, yy as u32);
            y.push(luma_y(p.0[0], p.0[1], p.0[2]));
        }
    }
    Ok((y, cw, ch))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (255.0 * 255.0 / mse).log10()
    }
}

/// Y-channel PSNR in dB after cropping `border_crop` pixels per side.
/// Identical images report the +inf sentinel.
pub fn psnr_y(a: &RgbImage, b: &RgbImage, border_crop: usize) -> Result<f64> {
    if a.dimensions() != b.dimensions() {
        return contract_err(format!(
            "image dims {:?} vs {:?}",
            a.dimensions(),
            b.dimensions()
        ));
    }
    let (ya, _, _) = y_plane(a, border_crop)?;
    let (yb, _, _) = y_plane(b, border_crop)?;
    let mse = ya
        .iter()
        .zip(&yb)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / ya.len() as f64;
    Ok(psnr_from_mse(mse))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn gaussian_window() -> [[f64; SSIM_WINDOW]; SSIM_WINDOW] {
    let mut w = [[0.0; SSIM_WINDOW]; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as isize;
    let mut sum = 0.0;
    for (i, row) in w.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let dy = i as isize - c;
            let dx = j as isize - c;
            *v = (-((dy * dy + dx * dx) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            sum += *v;
        }
    }
    for row in w.iter_mut() {
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    w
}

/// Single-scale SSIM on the Y channel: 11x11 Gaussian window (sigma 1.5),
/// C1 = (0.01*255)^2, C2 = (0.03*255)^2, mean over valid windows.
pub fn ssim_y(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    if a.dimensions() != b.dimensions() {
        return contract_err(format!(
            "image dims {:?} vs {:?}",
            a.dimensions(),
            b.dimensions()
        ));
    }
    let (w, h) = a.dimensions();
    let (w, h) = (w as usize, h as usize);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return contract_err(format!(
            "image {w}x{h} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        ));
    }
    let (ya, _, _) = y_plane(a, 0)?;
    let (yb, _, _) = y_plane(b, 0)?;
    let win = gaussian_window();
    let c1 = (0.01 * 255.0f64).powi(2);
    let c2 = (0.03 * 255.0f64).powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for oy in 0..=h - SSIM_WINDOW {
        for ox in 0..=w - SSIM_WINDOW {
            let mut mu_a = 0.0;
            let mut mu_b = 0.0;
            let mut aa = 0.0;
            let mut bb = 0.0;
            let mut ab = 0.0;
            for (i, row) in win.iter().enumerate() {
                for (j, &g) in row.iter().enumerate() {
                    let va = ya[(oy + i) * w + ox + j];
                    let vb = yb[(oy + i) * w + ox + j];
                    mu_a += g * va;
                    mu_b += g * vb;
                    aa += g * va * va;
                    bb += g * vb * vb;
                    ab += g * va * vb;
                }
            }
            let var_a = aa - mu_a * mu_a;
            let var_b = bb - mu_b * mu_b;
            let cov = ab - mu_a * mu_b;
            let s = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
            total += s;
            count += 1;
        }
    }
    Ok(total / count as f64)
}
