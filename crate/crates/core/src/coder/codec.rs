//! Image encoder and decoder built on a trained [`CodecModel`].
//!
//! Hyper latents are coded first with static per-channel tables from the
//! factorized priors. Each latent band is then coded position by position in
//! raster order; the Gaussian parameters for a position come from the
//! hyper side information and the context of already coded positions of the
//! same band, evaluated by [`BandCoder`] on both sides with identical
//! arithmetic.

use sha2::{Digest, Sha256};

use super::bitstream::{Bitstream, Header};
use super::cdf::{build_cdf, CdfTable};
use super::range::{Escaped, RangeDecoder, RangeEncoder};
use crate::entropy::{bits_of, gaussian_bin_mass, normal_cdf, sigma_from_raw_value, Quantizer};
use crate::error::{Error, Result};
use crate::imageio::{clamp_unit, crop, pad_to_multiple};
use crate::layers::Module;
use crate::network::{Band, BandModel, CodecModel, HyperInput, SPATIAL_MULTIPLE};
use crate::octave::{MfTensor, MfVar};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Half-width of the in-range alphabet for latent residuals.
pub const Y_BOUND: i64 = 64;

/// SHA-256 over the architecture description and every parameter.
pub fn model_digest(model: &CodecModel<f32>) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(model.config.describe().as_bytes());
    model.visit("", &mut |name, p| {
        h.update(name.as_bytes());
        for &d in p.value.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            h.update(v.to_le_bytes());
        }
    });
    let mut out = [0u8; 32];
    out.copy_from_slice(&h.finalize());
    out
}

fn short_digest(model: &CodecModel<f32>) -> [u8; 8] {
    let mut d = [0u8; 8];
    d.copy_from_slice(&model_digest(model)[..8]);
    d
}

fn hex(b: &[u8]) -> String {
    b.iter().map(|v| format!("{v:02x}")).collect()
}

/// Model-predicted bits of each payload, `sum(-log2 p)` from a test-mode
/// forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RateEstimate {
    pub z_hf: f64,
    pub z_lf: f64,
    pub y_hf: f64,
    pub y_lf: f64,
}

impl RateEstimate {
    pub fn total(&self) -> f64 {
        self.z_hf + self.z_lf + self.y_hf + self.y_lf
    }
}

pub struct Encoded {
    pub bitstream: Bitstream,
    /// What the decoder will output, computed on the encoder side.
    pub reconstruction: Tensor<f32>,
    pub estimate: RateEstimate,
}

struct Dense {
    w: Vec<f64>,
    b: Vec<f64>,
    n_in: usize,
}

impl Dense {
    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for (o, &b) in self.b.iter().enumerate() {
            let row = &self.w[o * self.n_in..(o + 1) * self.n_in];
            out.push(b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>());
        }
    }
}

/// Per-position evaluation of one band's context model and parameter
/// estimator, mirroring the convolutional forward pass.
pub struct BandCoder {
    c: usize,
    /// `(dy, dx)` of the taps that may be open.
    taps: Vec<(isize, isize)>,
    /// `[2c][c][taps]`, mask applied.
    ctx_w: Vec<f64>,
    ctx_b: Vec<f64>,
    layers: Vec<Dense>,
    slope: f64,
}

/// Latent values of one band as they become known, with an access check.
struct Plane {
    c: usize,
    h: usize,
    w: usize,
    values: Vec<i64>,
    defined: Vec<bool>,
}

impl Plane {
    fn new(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            values: vec![0; c * h * w],
            defined: vec![false; h * w],
        }
    }

    fn get(&self, ch: usize, r: isize, s: isize) -> Result<f64> {
        if r < 0 || s < 0 || r >= self.h as isize || s >= self.w as isize {
            return Ok(0.0);
        }
        let pos = r as usize * self.w + s as usize;
        if !self.defined[pos] {
            return Err(Error::Corrupt(format!(
                "context read latent position ({r}, {s}) before it was coded"
            )));
        }
        Ok(self.values[ch * self.h * self.w + pos] as f64)
    }
}

impl BandCoder {
    pub fn new(bm: &BandModel<f32>) -> Self {
        let conv = &bm.context.conv;
        let (c_out, c) = (conv.c_out(), conv.c_in());
        let k = conv.kernel_size();
        let pad = conv.pad as isize;
        let open = k * k / 2;
        let w = conv.weight.value.data();
        let m = bm.context.mask.data();
        let mut ctx_w = Vec::with_capacity(c_out * c * open);
        for o in 0..c_out {
            for ci in 0..c {
                for t in 0..open {
                    let i = (o * c + ci) * k * k + t;
                    ctx_w.push(w[i] as f64 * m[i] as f64);
                }
            }
        }
        let taps = (0..open)
            .map(|t| ((t / k) as isize - pad, (t % k) as isize - pad))
            .collect();
        let layers = bm
            .estimator
            .layers
            .iter()
            .map(|l| Dense {
                w: l.weight.value.data().iter().map(|&v| v as f64).collect(),
                b: l.bias.value.data().iter().map(|&v| v as f64).collect(),
                n_in: l.c_in(),
            })
            .collect();
        Self {
            c,
            taps,
            ctx_w,
            ctx_b: conv.bias.value.data().iter().map(|&v| v as f64).collect(),
            layers,
            slope: bm.estimator.slope,
        }
    }

    /// `(mu, sigma)` for every channel at raster position `pos`. `psi` is
    /// the band's side information, `[2c, h, w]` flattened.
    fn params_at(&self, plane: &Plane, psi: &[f32], pos: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let (h, w, c) = (plane.h, plane.w, self.c);
        let (r, s) = ((pos / w) as isize, (pos % w) as isize);
        let n_taps = self.taps.len();
        let mut neigh = Vec::with_capacity(c * n_taps);
        for ci in 0..c {
            for &(dy, dx) in &self.taps {
                neigh.push(plane.get(ci, r + dy, s + dx)?);
            }
        }
        let mut x = Vec::with_capacity(4 * c);
        for ch in 0..2 * c {
            x.push(psi[ch * h * w + pos] as f64);
        }
        for (o, &b) in self.ctx_b.iter().enumerate() {
            let row = &self.ctx_w[o * c * n_taps..(o + 1) * c * n_taps];
            x.push(b + row.iter().zip(&neigh).map(|(w, v)| w * v).sum::<f64>());
        }
        let mut y = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            l.apply(&x, &mut y);
            if i + 1 < self.layers.len() {
                for v in y.iter_mut() {
                    if *v < 0.0 {
                        *v *= self.slope;
                    }
                }
            }
            std::mem::swap(&mut x, &mut y);
        }
        let mu = x[..c].to_vec();
        let sigma = x[c..2 * c].iter().map(|&raw| sigma_from_raw_value(raw)).collect();
        Ok((mu, sigma))
    }

    /// `(mu, sigma)` of every position of a fully known band `[1, c, h, w]`,
    /// evaluated in coding order.
    pub fn predict(&self, y: &Tensor<f32>, psi: &Tensor<f32>) -> Result<(Tensor<f64>, Tensor<f64>)> {
        let [_, c, h, w] = y.dims4()?;
        let values = to_ints(y);
        let mut mu = vec![0.0; c * h * w];
        let mut sigma = vec![0.0; c * h * w];
        self.walk(h, w, psi.data(), |ch, pos, m, s| {
            mu[ch * h * w + pos] = m;
            sigma[ch * h * w + pos] = s;
            Ok(values[ch * h * w + pos])
        })?;
        Ok((Tensor::new([1, c, h, w], mu)?, Tensor::new([1, c, h, w], sigma)?))
    }

    /// Visits the band in coding order. `code` receives the channel, the
    /// predicted `(mu, sigma)` and returns the latent value at that spot.
    fn walk(
        &self,
        h: usize,
        w: usize,
        psi: &[f32],
        mut code: impl FnMut(usize, usize, f64, f64) -> Result<i64>,
    ) -> Result<Vec<i64>> {
        let mut plane = Plane::new(self.c, h, w);
        for pos in 0..h * w {
            let (mu, sigma) = self.params_at(&plane, psi, pos)?;
            for ch in 0..self.c {
                plane.values[ch * h * w + pos] = code(ch, pos, mu[ch], sigma[ch])?;
            }
            plane.defined[pos] = true;
        }
        debug_assert_eq!(plane.values.len(), plane.c * h * w);
        Ok(plane.values)
    }
}

/// Table for the residual `y - round(mu)` over `[-Y_BOUND, Y_BOUND]` plus
/// the two escape bins.
pub fn gaussian_table(mu: f64, sigma: f64) -> Result<(CdfTable, i64)> {
    if !(mu.is_finite() && sigma.is_finite() && sigma > 0.0) {
        return Err(Error::NonFinite {
            op: "entropy parameters",
        });
    }
    let centre = mu.round().clamp(-1e15, 1e15) as i64;
    let b = Y_BOUND;
    let mut pmf = Vec::with_capacity(2 * b as usize + 3);
    pmf.push(normal_cdf(((centre - b) as f64 - 0.5 - mu) / sigma));
    for j in -b..=b {
        pmf.push(gaussian_bin_mass((centre + j) as f64, mu, sigma));
    }
    pmf.push(normal_cdf(-(((centre + b) as f64 + 0.5 - mu) / sigma)));
    Ok((build_cdf(&pmf)?, centre))
}

/// Static per-channel tables of a factorized prior.
fn prior_tables(bm: &BandModel<f32>) -> Result<(Vec<CdfTable>, Escaped)> {
    let prior = &bm.prior;
    let esc = Escaped::new(prior.half_width() as i64);
    let tables = (0..prior.channels())
        .map(|ch| {
            let mut pmf = vec![0.0];
            pmf.extend(prior.cdf(ch).integer_pmf());
            pmf.push(0.0);
            build_cdf(&pmf)
        })
        .collect::<Result<_>>()?;
    Ok((tables, esc))
}

fn to_ints(t: &Tensor<f32>) -> Vec<i64> {
    t.data().iter().map(|&v| v as i64).collect()
}

fn encode_z(bm: &BandModel<f32>, z: &[i64], c: usize, hw: usize) -> Result<Vec<u8>> {
    let (tables, esc) = prior_tables(bm)?;
    let mut enc = RangeEncoder::new();
    for ch in 0..c {
        for &v in &z[ch * hw..(ch + 1) * hw] {
            esc.encode(&mut enc, &tables[ch], v)?;
        }
    }
    Ok(enc.finish())
}

fn decode_z(bm: &BandModel<f32>, bytes: &[u8], c: usize, h: usize, w: usize) -> Result<Tensor<f32>> {
    let (tables, esc) = prior_tables(bm)?;
    let mut dec = RangeDecoder::new(bytes)?;
    let mut out = Vec::with_capacity(c * h * w);
    for table in tables.iter().take(c) {
        for _ in 0..h * w {
            out.push(esc.decode(&mut dec, table)? as f32);
        }
    }
    finish_payload(&dec, bytes, "hyper latents")?;
    Tensor::new([1, c, h, w], out)
}

fn finish_payload(dec: &RangeDecoder, bytes: &[u8], what: &str) -> Result<()> {
    if dec.position() != bytes.len() {
        return Err(Error::Corrupt(format!(
            "{what}: {} unused bytes after decoding",
            bytes.len() - dec.position()
        )));
    }
    Ok(())
}

fn encode_y(coder: &BandCoder, y: &[i64], h: usize, w: usize, psi: &[f32]) -> Result<Vec<u8>> {
    let esc = Escaped::new(Y_BOUND);
    let mut enc = RangeEncoder::new();
    coder.walk(h, w, psi, |ch, pos, mu, sigma| {
        let v = y[ch * h * w + pos];
        let (table, centre) = gaussian_table(mu, sigma)?;
        esc.encode(&mut enc, &table, v - centre)?;
        Ok(v)
    })?;
    Ok(enc.finish())
}

fn decode_y(coder: &BandCoder, bytes: &[u8], h: usize, w: usize, psi: &[f32]) -> Result<Tensor<f32>> {
    let esc = Escaped::new(Y_BOUND);
    let mut dec = RangeDecoder::new(bytes)?;
    let values = coder.walk(h, w, psi, |_, _, mu, sigma| {
        let (table, centre) = gaussian_table(mu, sigma)?;
        Ok(esc.decode(&mut dec, &table)? + centre)
    })?;
    finish_payload(&dec, bytes, "latents")?;
    Tensor::new([1, coder.c, h, w], values.into_iter().map(|v| v as f32).collect())
}

/// Hyper synthesis on decoded hyper latents; identical on both sides.
fn side_info(model: &CodecModel<f32>, z_hat: &MfTensor<f32>) -> Result<MfTensor<f32>> {
    let mut tape = Tape::new();
    let z = z_hat.constant(&mut tape);
    let psi = model.hyper_synthesis(&mut tape, z)?;
    Ok(psi.value(&tape))
}

fn reconstruct(model: &CodecModel<f32>, y_hat: &MfTensor<f32>, h: usize, w: usize) -> Result<Tensor<f32>> {
    let mut tape = Tape::new();
    let y = y_hat.constant(&mut tape);
    let x = model.synthesis(&mut tape, y)?;
    Ok(clamp_unit(&crop(tape.value(x), h, w)?))
}

fn band_model(model: &CodecModel<f32>, band: Band) -> Result<&BandModel<f32>> {
    model
        .band(band)
        .ok_or_else(|| Error::Config(format!("model has no {} band", band.name())))
}

/// Compresses one `[1, 3, h, w]` image with values in `[0, 1]`. The image is
/// padded by edge replication to multiples of [`SPATIAL_MULTIPLE`].
pub fn encode_image(model: &CodecModel<f32>, x: &Tensor<f32>, lambda: f32) -> Result<Encoded> {
    let [n, c, h, w] = x.dims4()?;
    if n != 1 || c != 3 {
        return Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: "expected a single RGB image [1, 3, h, w]".into(),
        });
    }
    if !x.is_finite() {
        return Err(Error::NonFinite { op: "input image" });
    }
    let padded = pad_to_multiple(x, SPATIAL_MULTIPLE)?;
    let [_, _, ph, pw] = padded.dims4()?;

    let mut tape = Tape::new();
    let xv = tape.constant(padded.clone());
    let y = model.analysis(&mut tape, xv)?;
    let y_hat = MfVar {
        hf: tape.round(y.hf),
        lf: y.lf.map(|v| tape.round(v)),
    };
    let hyper_in = match model.config.hyper_input {
        HyperInput::Quantized => y_hat,
        HyperInput::PreQuantization => y,
    };
    let z = model.hyper_analysis(&mut tape, hyper_in)?;
    let z_hat = MfVar {
        hf: tape.round(z.hf),
        lf: z.lf.map(|v| tape.round(v)),
    };
    let y_hat = y_hat.value(&tape);
    let z_hat = z_hat.value(&tape);
    let psi = side_info(model, &z_hat)?;

    let hf = band_model(model, Band::Hf)?;
    let [_, zc, zh, zw] = z_hat.hf.dims4()?;
    let z_hf = encode_z(hf, &to_ints(&z_hat.hf), zc, zh * zw)?;
    let z_lf = match (&z_hat.lf, model.band(Band::Lf)) {
        (Some(zl), Some(lf)) => {
            let [_, c, h, w] = zl.dims4()?;
            encode_z(lf, &to_ints(zl), c, h * w)?
        }
        _ => Vec::new(),
    };

    let code_band = |band: Band, yb: &Tensor<f32>, pb: &Tensor<f32>| -> Result<Vec<u8>> {
        let coder = BandCoder::new(band_model(model, band)?);
        let [_, _, h, w] = yb.dims4()?;
        encode_y(&coder, &to_ints(yb), h, w, pb.data())
    };
    let (y_hf, y_lf) = rayon::join(
        || code_band(Band::Hf, &y_hat.hf, &psi.hf),
        || match (&y_hat.lf, &psi.lf) {
            (Some(yl), Some(pl)) => code_band(Band::Lf, yl, pl),
            _ => Ok(Vec::new()),
        },
    );

    let bitstream = Bitstream {
        header: Header {
            orig_width: w as u32,
            orig_height: h as u32,
            padded_width: pw as u32,
            padded_height: ph as u32,
            digest: short_digest(model),
            lambda,
        },
        z_hf,
        z_lf,
        y_hf: y_hf?,
        y_lf: y_lf?,
    };
    let reconstruction = reconstruct(model, &y_hat, h, w)?;
    let estimate = estimate_rate(model, &padded)?;
    Ok(Encoded {
        bitstream,
        reconstruction,
        estimate,
    })
}

/// `sum(-log2 p)` per payload from a test-mode forward pass on an already
/// padded image.
pub fn estimate_rate(model: &CodecModel<f32>, padded: &Tensor<f32>) -> Result<RateEstimate> {
    let mut tape = Tape::new();
    let x = tape.constant(padded.clone());
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let out = model.forward(&mut tape, x, Quantizer::TestRound, &mut rng)?;
    let bits = |v: Option<crate::Var>| v.map_or(0.0, |v| bits_of(tape.value(v)));
    Ok(RateEstimate {
        z_hf: bits(Some(out.lik_z.hf)),
        z_lf: bits(out.lik_z.lf),
        y_hf: bits(Some(out.lik_y.hf)),
        y_lf: bits(out.lik_y.lf),
    })
}

pub fn decode_image(bs: &Bitstream, model: &CodecModel<f32>) -> Result<Tensor<f32>> {
    decode_image_with(bs, model, true)
}

/// `parallel` decodes the two latent bands on separate threads.
pub fn decode_image_with(bs: &Bitstream, model: &CodecModel<f32>, parallel: bool) -> Result<Tensor<f32>> {
    let hd = &bs.header;
    let expected = short_digest(model);
    if hd.digest != expected {
        return Err(Error::DigestMismatch {
            stream: hex(&hd.digest),
            model: hex(&expected),
        });
    }
    let (ph, pw) = (hd.padded_height as usize, hd.padded_width as usize);
    if ph % SPATIAL_MULTIPLE != 0 || pw % SPATIAL_MULTIPLE != 0 {
        return Err(Error::Corrupt(format!(
            "padded size {pw}x{ph} is not a multiple of {SPATIAL_MULTIPLE}"
        )));
    }
    let has_lf = model.config.has_lf();
    if !has_lf && (!bs.z_lf.is_empty() || !bs.y_lf.is_empty()) {
        return Err(Error::Corrupt("low-frequency payload for a single-band model".into()));
    }
    let (mh, ml) = model.config.latent_split();
    let (nh, nl) = model.config.hyper_split();
    let hf = band_model(model, Band::Hf)?;

    let z_hf = decode_z(hf, &bs.z_hf, nh, ph / 64, pw / 64)?;
    let z_lf = if has_lf {
        Some(decode_z(
            band_model(model, Band::Lf)?,
            &bs.z_lf,
            nl,
            ph / 128,
            pw / 128,
        )?)
    } else {
        None
    };
    let psi = side_info(model, &MfTensor::new(z_hf, z_lf)?)?;

    let band_hf = || decode_y(&BandCoder::new(hf), &bs.y_hf, ph / 16, pw / 16, psi.hf.data());
    let band_lf = || -> Result<Option<Tensor<f32>>> {
        match &psi.lf {
            Some(pl) if has_lf => {
                let coder = BandCoder::new(band_model(model, Band::Lf)?);
                debug_assert_eq!(coder.c, ml);
                decode_y(&coder, &bs.y_lf, ph / 32, pw / 32, pl.data()).map(Some)
            }
            _ => Ok(None),
        }
    };
    let (y_hf, y_lf) = if parallel {
        rayon::join(band_hf, band_lf)
    } else {
        (band_hf(), band_lf())
    };
    let y_hf = y_hf?;
    debug_assert_eq!(y_hf.shape()[1], mh);
    let y_hat = MfTensor::new(y_hf, y_lf?)?;
    reconstruct(model, &y_hat, hd.orig_height as usize, hd.orig_width as usize)
}
