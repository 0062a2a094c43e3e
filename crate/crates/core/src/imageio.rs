//! Image files to and from `[1, 3, h, w]` tensors in `[0, 1]`.

use std::path::Path;

use image::{ImageFormat, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Reads a PNG or PPM (any layout the decoder accepts; converted to RGB8).
pub fn load(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let img = image::open(path.as_ref())?.to_rgb8();
    Ok(from_rgb8(&img))
}

/// Writes PNG or PPM depending on the extension.
pub fn save(path: impl AsRef<Path>, x: &Tensor<f32>) -> Result<()> {
    let path = path.as_ref();
    let format = match path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
    {
        Some(e) if e == "png" => ImageFormat::Png,
        Some(e) if e == "ppm" || e == "pnm" => ImageFormat::Pnm,
        _ => return Err(Error::Config(format!("unsupported output format: {}", path.display()))),
    };
    to_rgb8(x)?.save_with_format(path, format)?;
    Ok(())
}

pub fn from_rgb8(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    Tensor::from_fn([1, 3, h, w], |i| {
        let c = i / (h * w);
        let p = i % (h * w);
        img.get_pixel((p % w) as u32, (p / w) as u32)[c] as f32 / 255.0
    })
}

pub fn to_rgb8(x: &Tensor<f32>) -> Result<RgbImage> {
    let [n, c, h, w] = x.dims4()?;
    if n != 1 || c != 3 {
        return Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: "expected a single RGB image".into(),
        });
    }
    let d = x.data();
    let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    Ok(RgbImage::from_fn(w as u32, h as u32, |px, py| {
        let p = py as usize * w + px as usize;
        Rgb([q(d[p]), q(d[h * w + p]), q(d[2 * h * w + p])])
    }))
}

/// Pads the bottom and right edges by replication so both sides become
/// multiples of `multiple`.
pub fn pad_to_multiple(x: &Tensor<f32>, multiple: usize) -> Result<Tensor<f32>> {
    let [n, c, h, w] = x.dims4()?;
    if h == 0 || w == 0 {
        return Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: "empty image".into(),
        });
    }
    let (ph, pw) = (h.div_ceil(multiple) * multiple, w.div_ceil(multiple) * multiple);
    if (ph, pw) == (h, w) {
        return Ok(x.clone());
    }
    let d = x.data();
    Ok(Tensor::from_fn([n, c, ph, pw], |i| {
        let plane = i / (ph * pw);
        let p = i % (ph * pw);
        let (r, s) = ((p / pw).min(h - 1), (p % pw).min(w - 1));
        d[plane * h * w + r * w + s]
    }))
}

/// Top-left `h x w` window.
pub fn crop(x: &Tensor<f32>, h: usize, w: usize) -> Result<Tensor<f32>> {
    let [n, c, xh, xw] = x.dims4()?;
    if h > xh || w > xw {
        return Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: format!("cannot crop to {h}x{w}"),
        });
    }
    let d = x.data();
    Ok(Tensor::from_fn([n, c, h, w], |i| {
        let plane = i / (h * w);
        let p = i % (h * w);
        d[plane * xh * xw + (p / w) * xw + p % w]
    }))
}

pub fn clamp_unit(x: &Tensor<f32>) -> Tensor<f32> {
    x.map(|v| v.clamp(0.0, 1.0))
}
