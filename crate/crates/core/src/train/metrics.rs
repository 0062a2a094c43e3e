//! Image quality metrics on `[0, 1]`-scaled images.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Per-scale exponents of the five-scale MS-SSIM.
pub const MSSSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const WINDOW: usize = 11;
pub const WINDOW_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;
/// Keeps fractional powers of slightly negative similarity terms defined.
const TERM_FLOOR: f64 = 1e-6;

fn check_pair<T: Real>(x: &Tensor<T>, y: &Tensor<T>) -> Result<[usize; 4]> {
    if x.shape() != y.shape() {
        return Err(Error::ShapeMismatch {
            lhs: x.shape().to_vec(),
            rhs: y.shape().to_vec(),
            context: "metric inputs",
        });
    }
    x.dims4()
}

pub fn mse(x: &Tensor<f32>, y: &Tensor<f32>) -> Result<f64> {
    check_pair(x, y)?;
    let n = x.numel();
    if n == 0 {
        return Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: "empty image".into(),
        });
    }
    let s: f64 = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    Ok(s / n as f64)
}

/// `-10 log10(mse)`; identical images give `f64::INFINITY`.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

pub fn psnr(x: &Tensor<f32>, y: &Tensor<f32>) -> Result<f64> {
    Ok(psnr_from_mse(mse(x, y)?))
}

/// `-10 log10(1 - v)`; `v = 1` gives `f64::INFINITY`.
pub fn msssim_db(v: f64) -> f64 {
    if v >= 1.0 {
        f64::INFINITY
    } else {
        -10.0 * (1.0 - v).log10()
    }
}

/// Number of scales usable for an `h x w` image: the coarsest scale must
/// still fit the window.
pub fn msssim_scales(h: usize, w: usize) -> Result<usize> {
    let mut side = h.min(w);
    let mut scales = 0;
    while scales < MSSSIM_WEIGHTS.len() && side >= WINDOW {
        scales += 1;
        side /= 2;
    }
    if scales == 0 {
        return Err(Error::InvalidShape {
            shape: vec![h, w],
            reason: format!("MS-SSIM needs both sides >= {WINDOW}"),
        });
    }
    Ok(scales)
}

/// Normalized `[1, 1, 11, 11]` Gaussian window.
pub fn gaussian_window<T: Real>() -> Tensor<T> {
    let c = (WINDOW / 2) as f64;
    let g: Vec<f64> = (0..WINDOW)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    let g: Vec<f64> = g.iter().map(|v| v / s).collect();
    Tensor::from_fn([1, 1, WINDOW, WINDOW], |i| T::of(g[i / WINDOW] * g[i % WINDOW]))
}

/// Mean contrast-structure and mean SSIM of every plane, both `[planes, 1, 1, 1]`.
fn ssim_terms<T: Real>(tape: &mut Tape<T>, a: Var, b: Var, win: Var) -> Result<(Var, Var)> {
    let [n, c, h, w] = tape.value(a).dims4()?;
    let planes = n * c;
    let a = tape.reshape(a, &[planes, 1, h, w])?;
    let b = tape.reshape(b, &[planes, 1, h, w])?;
    let aa = tape.square(a)?;
    let bb = tape.square(b)?;
    let ab = tape.mul(a, b)?;
    let stack = tape.concat_channels(&[a, b, aa, bb, ab])?;
    let stack = tape.reshape(stack, &[planes * 5, 1, h, w])?;
    let f = tape.conv2d(stack, win, None, 1, 0)?;
    let (ho, wo) = (h - WINDOW + 1, w - WINDOW + 1);
    let f = tape.reshape(f, &[planes, 5, ho, wo])?;
    let mut m = [f; 5];
    for (i, slot) in m.iter_mut().enumerate() {
        *slot = tape.slice_channels(f, i, 1)?;
    }
    let [mu_a, mu_b, e_aa, e_bb, e_ab] = m;
    let mu_aa = tape.square(mu_a)?;
    let mu_bb = tape.square(mu_b)?;
    let mu_ab = tape.mul(mu_a, mu_b)?;
    let s_aa = tape.sub(e_aa, mu_aa)?;
    let s_bb = tape.sub(e_bb, mu_bb)?;
    let s_ab = tape.sub(e_ab, mu_ab)?;

    let num = tape.scale(s_ab, 2.0)?;
    let num = tape.add_scalar(num, C2)?;
    let den = tape.add(s_aa, s_bb)?;
    let den = tape.add_scalar(den, C2)?;
    let cs_map = tape.div(num, den)?;

    let lnum = tape.scale(mu_ab, 2.0)?;
    let lnum = tape.add_scalar(lnum, C1)?;
    let lden = tape.add(mu_aa, mu_bb)?;
    let lden = tape.add_scalar(lden, C1)?;
    let l_map = tape.div(lnum, lden)?;
    let ssim_map = tape.mul(l_map, cs_map)?;

    Ok((tape.mean_hw(cs_map)?, tape.mean_hw(ssim_map)?))
}

/// MS-SSIM of two `[n, c, h, w]` tensors, averaged over images and channels.
/// Images too small for five scales use fewer, with the leading weights
/// renormalized to sum to one.
pub fn msssim_var<T: Real>(tape: &mut Tape<T>, x: Var, y: Var) -> Result<Var> {
    check_pair(tape.value(x), tape.value(y))?;
    let [_, _, h, w] = tape.value(x).dims4()?;
    let scales = msssim_scales(h, w)?;
    let total: f64 = MSSSIM_WEIGHTS[..scales].iter().sum();
    let win = tape.constant(gaussian_window());
    let (mut a, mut b) = (x, y);
    let mut acc: Option<Var> = None;
    for (s, &weight) in MSSSIM_WEIGHTS[..scales].iter().enumerate() {
        let (cs, ssim) = ssim_terms(tape, a, b, win)?;
        let term = if s + 1 == scales { ssim } else { cs };
        let term = tape.clamp_min(term, TERM_FLOOR)?;
        let p = tape.powf(term, weight / total)?;
        acc = Some(match acc {
            Some(v) => tape.mul(v, p)?,
            None => p,
        });
        if s + 1 < scales {
            let [_, _, ha, wa] = tape.value(a).dims4()?;
            let (he, we) = (ha - ha % 2, wa - wa % 2);
            if (he, we) != (ha, wa) {
                a = tape.crop_hw(a, he, we)?;
                b = tape.crop_hw(b, he, we)?;
            }
            a = tape.avg_pool2(a)?;
            b = tape.avg_pool2(b)?;
        }
    }
    let acc = acc.expect("at least one scale");
    tape.mean(acc)
}

/// MS-SSIM evaluated in 64-bit precision.
pub fn msssim(x: &Tensor<f32>, y: &Tensor<f32>) -> Result<f64> {
    check_pair(x, y)?;
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(x.cast());
    let b = tape.constant(y.cast());
    let v = msssim_var(&mut tape, a, b)?;
    Ok(tape.value(v).item())
}
