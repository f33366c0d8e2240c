//! PNG loading/saving, bicubic resampling, tensor<->image conversion, and
//! reflect padding for resolutions the UNet cannot take directly.

use std::path::Path;

use image::imageops::{self, FilterType};
use image::{DynamicImage, ImageFormat, RgbImage};

use crate::error::{contract_err, Error, Result};
use crate::tensor::{Dims, Tensor4};

/// Load an 8-bit RGB PNG. Grayscale is promoted by channel replication,
/// alpha is dropped with a warning, 16-bit files are rejected.
pub fn load_png(path: &Path) -> Result<RgbImage> {
    let dynimg = image::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    match &dynimg {
        DynamicImage::ImageLuma16(_)
        | DynamicImage::ImageLumaA16(_)
        | DynamicImage::ImageRgb16(_)
        | DynamicImage::ImageRgba16(_) => {
            return Err(Error::Io(format!(
                "{}: 16-bit PNG is not supported; convert to 8-bit first",
                path.display()
            )))
        }
        _ => {}
    }
    if dynimg.color().has_alpha() {
        eprintln!("warning: {}: dropping alpha channel", path.display());
    }
    Ok(dynimg.to_rgb8())
}

/// Save as PNG with fixed encoder settings (deterministic bytes).
pub fn save_png(path: &Path, img: &RgbImage) -> Result<()> {
    img.save_with_format(path, ImageFormat::Png)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

pub fn bicubic_resize(img: &RgbImage, w: u32, h: u32) -> RgbImage {
    imageops::resize(img, w, h, FilterType::CatmullRom)
}

/// u8 RGB -> (1, 3, h, w) tensor in [-1, 1].
pub fn image_to_tensor(img: &RgbImage) -> Tensor4 {
    let (w, h) = img.dimensions();
    let mut t = Tensor4::zeros(Dims::new(1, 3, h as usize, w as usize));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            *t.at_mut(0, c, y as usize, x as usize) = p.0[c] as f32 / 127.5 - 1.0;
        }
    }
    t
}

/// (1, 3, h, w) tensor in [-1, 1] -> u8 RGB (clamped, rounded half away
/// from zero by `round`).
pub fn tensor_to_image(t: &Tensor4) -> Result<RgbImage> {
    let d = t.dims();
    if d.n != 1 || d.c != 3 {
        return contract_err(format!("expected a (1,3,h,w) tensor, got {d}"));
    }
    let mut img = RgbImage::new(d.w as u32, d.h as u32);
    for y in 0..d.h {
        for x in 0..d.w {
            let mut px = image::Rgb([0u8, 0, 0]);
            for c in 0..3 {
                let v = (t.at(0, c, y, x).clamp(-1.0, 1.0) + 1.0) * 127.5;
                px.0[c] = v.round().clamp(0.0, 255.0) as u8;
            }
            img.put_pixel(x as u32, y as u32, px);
        }
    }
    Ok(img)
}

/// Reflect-pad the bottom/right spatial edges (no repeated edge pixel).
pub fn reflect_pad(x: &Tensor4, pad_bottom: usize, pad_right: usize) -> Result<Tensor4> {
    let d = x.dims();
    if pad_bottom >= d.h || pad_right >= d.w {
        return contract_err(format!(
            "reflect pad ({pad_bottom},{pad_right}) too large for {}x{}",
            d.h, d.w
        ));
    }
    let od = Dims::new(d.n, d.c, d.h + pad_bottom, d.w + pad_right);
    let mut out = Tensor4::zeros(od);
    for n in 0..d.n {
        for c in 0..d.c {
            for y in 0..od.h {
                let sy = if y < d.h { y } else { 2 * d.h - 2 - y };
                for xx in 0..od.w {
                    let sx = if xx < d.w { xx } else { 2 * d.w - 2 - xx };
                    *out.at_mut(n, c, y, xx) = x.at(n, c, sy, sx);
                }
            }
        }
    }
    Ok(out)
}

pub fn crop(x: &Tensor4, h: usize, w: usize) -> Tensor4 {
    let d = x.dims();
    let od = Dims::new(d.n, d.c, h.min(d.h), w.min(d.w));
    let mut out = Tensor4::zeros(od);
    for n in 0..od.n {
        for c in 0..od.c {
            for y in 0..od.h {
                for xx in 0..od.w {
                    *out.at_mut(n, c, y, xx) = x.at(n, c, y, xx);
                }
            }
        }
    }
    out
}
