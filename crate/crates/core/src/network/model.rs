//! The full codec graph: core analysis/synthesis transforms, hyper
//! transforms, per-band context models and parameter estimators, and the
//! factorized priors of the hyper latents.

use rand::Rng;

use crate::entropy::{gaussian_likelihood, rate_bits, sigma_from_raw, FactorizedPrior, Quantizer};
use crate::error::{Error, Result};
use crate::layers::{join, ActKind, Conv2d, Init, MaskedConv2d, Module, Param};
use crate::octave::{split_channels, GoConv, GoConvFirst, GoTConv, GoTConvLast, MfVar, OctConv, OctTConv, UnitSpec};
use crate::real::Real;
use crate::tape::{Tape, Var};

use super::arch::{estimator_widths, ArchConfig, ContextInput, HyperInput, Variant};
use super::flops::{Counter, FlopReport, Hw};
use super::units::{BandAct, Chain, SigDims, Signal, Stage, Unit};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Band {
    Hf,
    Lf,
}

impl Band {
    pub fn name(self) -> &'static str {
        match self {
            Band::Hf => "hf",
            Band::Lf => "lf",
        }
    }
}

/// Three 1x1 convolutions with leaky ReLU between them, mapping the
/// concatenation of hyper side information and context features to the mean
/// and raw scale of each latent.
#[derive(Clone, Debug)]
pub struct ParamEstimator<T: Real> {
    pub layers: [Conv2d<T>; 3],
    pub slope: f64,
}

impl<T: Real> ParamEstimator<T> {
    pub fn new(latent_channels: usize, slope: f64, init: &mut Init) -> Self {
        let [a, b, c, d] = estimator_widths(latent_channels);
        Self {
            layers: [
                Conv2d::new(a, b, 1, 1, init),
                Conv2d::new(b, c, 1, 1, init),
                Conv2d::new(c, d, 1, 1, init),
            ],
            slope,
        }
    }

    pub fn latent_channels(&self) -> usize {
        self.layers[2].c_out() / 2
    }

    /// `(mu, sigma)` with `sigma >= SIGMA_MIN`.
    pub fn forward(&self, tape: &mut Tape<T>, psi: Var, phi: Var) -> Result<(Var, Var)> {
        let (ps, fs) = (tape.shape(psi).to_vec(), tape.shape(phi).to_vec());
        if ps.len() != 4 || fs.len() != 4 || ps[0] != fs[0] || ps[2..] != fs[2..] {
            return Err(Error::ShapeMismatch {
                lhs: ps,
                rhs: fs,
                context: "hyper side information and context features must be aligned",
            });
        }
        let mut h = tape.concat_channels(&[psi, phi])?;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(tape, h)?;
            if i < 2 {
                h = tape.leaky_relu(h, self.slope)?;
            }
        }
        let c = self.latent_channels();
        let mu = tape.slice_channels(h, 0, c)?;
        let raw = tape.slice_channels(h, c, c)?;
        let sigma = sigma_from_raw(tape, raw)?;
        Ok((mu, sigma))
    }
}

impl<T: Real> Module<T> for ParamEstimator<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &i.to_string()), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

/// Entropy-model parts that belong to one frequency band.
#[derive(Clone, Debug)]
pub struct BandModel<T: Real> {
    pub context: MaskedConv2d<T>,
    pub estimator: ParamEstimator<T>,
    pub prior: FactorizedPrior<T>,
}

impl<T: Real> Module<T> for BandModel<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.context.visit(&join(prefix, "context"), f);
        self.estimator.visit(&join(prefix, "estimator"), f);
        self.prior.visit(&join(prefix, "prior"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.context.visit_mut(&join(prefix, "context"), f);
        self.estimator.visit_mut(&join(prefix, "estimator"), f);
        self.prior.visit_mut(&join(prefix, "prior"), f);
    }
}

/// Hyper analysis and synthesis transforms.
#[derive(Clone, Debug)]
pub enum Hyper<T: Real> {
    /// Multi-frequency transforms shared by both bands.
    Joint { enc: Chain<T>, dec: Chain<T> },
    /// An independent single-band network per band.
    Split {
        hf: (Chain<T>, Chain<T>),
        lf: Option<(Chain<T>, Chain<T>)>,
    },
}

impl<T: Real> Hyper<T> {
    fn analysis(&self, tape: &mut Tape<T>, y: MfVar) -> Result<MfVar> {
        match self {
            Hyper::Joint { enc, .. } => enc.forward(tape, Signal::Mf(y))?.mf(),
            Hyper::Split { hf, lf } => split_forward(tape, y, &hf.0, lf.as_ref().map(|l| &l.0)),
        }
    }

    fn synthesis(&self, tape: &mut Tape<T>, z: MfVar) -> Result<MfVar> {
        match self {
            Hyper::Joint { dec, .. } => dec.forward(tape, Signal::Mf(z))?.mf(),
            Hyper::Split { hf, lf } => split_forward(tape, z, &hf.1, lf.as_ref().map(|l| &l.1)),
        }
    }
}

fn split_forward<T: Real>(tape: &mut Tape<T>, x: MfVar, hf: &Chain<T>, lf: Option<&Chain<T>>) -> Result<MfVar> {
    let h = hf.forward(tape, Signal::Mf(MfVar { hf: x.hf, lf: None }))?.mf()?.hf;
    let l = match (lf, x.lf) {
        (Some(c), Some(v)) => Some(c.forward(tape, Signal::Mf(MfVar { hf: v, lf: None }))?.mf()?.hf),
        (None, None) => None,
        _ => return Err(Error::Config("hyper network bands do not match the input".into())),
    };
    Ok(MfVar { hf: h, lf: l })
}

impl<T: Real> Module<T> for Hyper<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        match self {
            Hyper::Joint { enc, dec } => {
                enc.visit(&join(prefix, "enc"), f);
                dec.visit(&join(prefix, "dec"), f);
            }
            Hyper::Split { hf, lf } => {
                hf.0.visit(&join(prefix, "enc.hf"), f);
                hf.1.visit(&join(prefix, "dec.hf"), f);
                if let Some(lf) = lf {
                    lf.0.visit(&join(prefix, "enc.lf"), f);
                    lf.1.visit(&join(prefix, "dec.lf"), f);
                }
            }
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        match self {
            Hyper::Joint { enc, dec } => {
                enc.visit_mut(&join(prefix, "enc"), f);
                dec.visit_mut(&join(prefix, "dec"), f);
            }
            Hyper::Split { hf, lf } => {
                hf.0.visit_mut(&join(prefix, "enc.hf"), f);
                hf.1.visit_mut(&join(prefix, "dec.hf"), f);
                if let Some(lf) = lf {
                    lf.0.visit_mut(&join(prefix, "enc.lf"), f);
                    lf.1.visit_mut(&join(prefix, "dec.lf"), f);
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct CodecModel<T: Real = f32> {
    pub config: ArchConfig,
    pub enc: Chain<T>,
    pub dec: Chain<T>,
    pub hyper: Hyper<T>,
    pub hf: BandModel<T>,
    pub lf: Option<BandModel<T>>,
}

/// Everything produced by one pass through the model.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub y: MfVar,
    pub y_hat: MfVar,
    pub z_hat: MfVar,
    pub mu: MfVar,
    pub sigma: MfVar,
    pub lik_y: MfVar,
    pub lik_z: MfVar,
    pub x_hat: Var,
    /// Bits of the HF latents and HF hyper latents.
    pub rate_hf: Var,
    pub rate_lf: Option<Var>,
    pub rate: Var,
}

#[derive(Clone, Copy)]
enum Pos {
    First,
    Mid,
    Last,
}

struct Builder<'a> {
    cfg: &'a ArchConfig,
    init: &'a mut Init,
}

impl Builder<'_> {
    fn spec(&self, c_in: usize, c_out: usize, k: usize, stride: usize, alpha: f64, act: ActKind) -> UnitSpec {
        UnitSpec {
            c_in,
            c_out,
            k,
            inter_k: self.cfg.inter_kernel(k),
            stride,
            alpha,
            act,
        }
    }

    fn encoder_stage<T: Real>(&mut self, pos: Pos, s: UnitSpec, variant: Variant) -> Result<Stage<T>> {
        let (ho, lo) = split_channels(s.c_out, s.alpha)?;
        Ok(match variant {
            Variant::OrgOct => Stage::new(match pos {
                Pos::First => Unit::OctFirst(OctConv::new_first(s, self.init)?),
                _ => Unit::Oct(OctConv::new(s, self.init)?),
            }),
            Variant::ActOut if s.act == ActKind::Gdn => {
                let inner = UnitSpec {
                    act: ActKind::Identity,
                    ..s
                };
                let unit = match pos {
                    Pos::First => Unit::GoFirst(GoConvFirst::new(inner, self.init)?),
                    _ => Unit::Go(GoConv::new(inner, self.init)?),
                };
                Stage {
                    pre: None,
                    unit,
                    post: Some(BandAct {
                        hf: ActKind::Gdn.build(ho),
                        lf: (lo > 0).then(|| ActKind::Gdn.build(lo)),
                    }),
                }
            }
            _ => Stage::new(match pos {
                Pos::First => Unit::GoFirst(GoConvFirst::new(s, self.init)?),
                _ => Unit::Go(GoConv::new(s, self.init)?),
            }),
        })
    }

    fn decoder_stage<T: Real>(&mut self, pos: Pos, s: UnitSpec, variant: Variant) -> Result<Stage<T>> {
        let (hi, li) = split_channels(s.c_in, s.alpha)?;
        Ok(match variant {
            Variant::OrgOct => Stage::new(match pos {
                Pos::Last => Unit::OctTLast(OctTConv::new_last(s, self.init)?),
                _ => Unit::OctT(OctTConv::new(s, self.init)?),
            }),
            Variant::ActOut if s.act == ActKind::Igdn => {
                let inner = UnitSpec {
                    act: ActKind::Identity,
                    ..s
                };
                let unit = match pos {
                    Pos::Last => Unit::GoTLast(GoTConvLast::new(inner, self.init)?),
                    _ => Unit::GoT(GoTConv::new(inner, self.init)?),
                };
                Stage {
                    pre: Some(BandAct {
                        hf: ActKind::Igdn.build(hi),
                        lf: (li > 0).then(|| ActKind::Igdn.build(li)),
                    }),
                    unit,
                    post: None,
                }
            }
            _ => Stage::new(match pos {
                Pos::Last => Unit::GoTLast(GoTConvLast::new(s, self.init)?),
                _ => Unit::GoT(GoTConv::new(s, self.init)?),
            }),
        })
    }

    /// Hyper analysis `m -> n -> n -> n` with strides 1, 2, 2.
    fn hyper_enc<T: Real>(&mut self, m: usize, n: usize, alpha: f64, variant: Variant) -> Result<Chain<T>> {
        let cfg = self.cfg;
        let act = ActKind::LeakyRelu(cfg.leaky_slope);
        let layers = [
            (m, n, cfg.k_hyper_first, 1),
            (n, n, cfg.k_hyper, 2),
            (n, n, cfg.k_hyper, 2),
        ];
        let mut stages = Vec::new();
        for (c_in, c_out, k, stride) in layers {
            let s = self.spec(c_in, c_out, k, stride, alpha, act);
            stages.push(self.encoder_stage(Pos::Mid, s, variant)?);
        }
        Ok(Chain { stages })
    }

    /// Hyper synthesis `n -> n -> 1.5n -> 2m` with strides 2, 2, 1.
    fn hyper_dec<T: Real>(&mut self, n: usize, mid: usize, m: usize, alpha: f64, variant: Variant) -> Result<Chain<T>> {
        let cfg = self.cfg;
        let act = ActKind::LeakyRelu(cfg.leaky_slope);
        let layers = [
            (n, n, cfg.k_hyper, 2),
            (n, mid, cfg.k_hyper, 2),
            (mid, 2 * m, cfg.k_hyper_first, 1),
        ];
        let mut stages = Vec::new();
        for (c_in, c_out, k, stride) in layers {
            let s = self.spec(c_in, c_out, k, stride, alpha, act);
            stages.push(self.decoder_stage(Pos::Mid, s, variant)?);
        }
        Ok(Chain { stages })
    }
}

impl<T: Real> CodecModel<T> {
    pub fn new(config: ArchConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init::new(seed);
        let cfg = config.clone();
        let mut b = Builder {
            cfg: &cfg,
            init: &mut init,
        };
        let (m, n, a, kc) = (cfg.m, cfg.n, cfg.alpha, cfg.k_core);
        let v = cfg.variant;

        let enc_layers = [(3, n, Pos::First), (n, n, Pos::Mid), (n, n, Pos::Mid), (n, m, Pos::Mid)];
        let mut enc = Vec::new();
        for (c_in, c_out, pos) in enc_layers {
            let s = b.spec(c_in, c_out, kc, 2, a, ActKind::Gdn);
            enc.push(b.encoder_stage(pos, s, v)?);
        }
        let dec_layers = [(m, n, Pos::Mid), (n, n, Pos::Mid), (n, n, Pos::Mid), (n, 3, Pos::Last)];
        let mut dec = Vec::new();
        for (c_in, c_out, pos) in dec_layers {
            let s = b.spec(c_in, c_out, kc, 2, a, ActKind::Igdn);
            dec.push(b.decoder_stage(pos, s, v)?);
        }

        let hyper = match v {
            Variant::CoreOct => {
                let (mh, ml) = split_channels(m, a)?;
                let (nh, nl) = split_channels(n, a)?;
                let (dh, dl) = split_channels(cfg.hyper_mid(), a)?;
                let hf = (
                    b.hyper_enc(mh, nh, 0.0, Variant::GoOct)?,
                    b.hyper_dec(nh, dh, mh, 0.0, Variant::GoOct)?,
                );
                let lf = if ml > 0 {
                    Some((
                        b.hyper_enc(ml, nl, 0.0, Variant::GoOct)?,
                        b.hyper_dec(nl, dl, ml, 0.0, Variant::GoOct)?,
                    ))
                } else {
                    None
                };
                Hyper::Split { hf, lf }
            }
            _ => Hyper::Joint {
                enc: b.hyper_enc(m, n, a, v)?,
                dec: b.hyper_dec(n, cfg.hyper_mid(), m, a, v)?,
            },
        };

        let (mh, ml) = cfg.latent_split();
        let (nh, nl) = cfg.hyper_split();
        let band = |c: usize, nz: usize, init: &mut Init| BandModel {
            context: MaskedConv2d::new(c, 2 * c, cfg.k_context, init),
            estimator: ParamEstimator::new(c, cfg.leaky_slope, init),
            prior: FactorizedPrior::new(nz),
        };
        let hf = band(mh, nh, &mut init);
        let lf = (ml > 0).then(|| band(ml, nl, &mut init));
        Ok(Self {
            config,
            enc: Chain { stages: enc },
            dec: Chain { stages: dec },
            hyper,
            hf,
            lf,
        })
    }

    pub fn band(&self, band: Band) -> Option<&BandModel<T>> {
        match band {
            Band::Hf => Some(&self.hf),
            Band::Lf => self.lf.as_ref(),
        }
    }

    fn spatial_multiple(&self, levels: u32) -> usize {
        let lf = if self.lf.is_some() { 2 } else { 1 };
        2usize.pow(levels) * lf
    }

    /// Core analysis transform: image `[n, 3, h, w]` to latents at 1/16 (HF)
    /// and 1/32 (LF) resolution.
    pub fn analysis(&self, tape: &mut Tape<T>, x: Var) -> Result<MfVar> {
        let shape = tape.shape(x).to_vec();
        let mult = self.spatial_multiple(4);
        match shape.as_slice() {
            &[_, 3, h, w] if h % mult == 0 && w % mult == 0 && h > 0 && w > 0 => {}
            _ => {
                return Err(Error::InvalidShape {
                    shape,
                    reason: format!("expected [n, 3, h, w] with h and w multiples of {mult}"),
                })
            }
        }
        self.enc.forward(tape, Signal::Plain(x))?.mf()
    }

    pub fn synthesis(&self, tape: &mut Tape<T>, y: MfVar) -> Result<Var> {
        self.dec.forward(tape, Signal::Mf(y))?.plain()
    }

    /// Hyper analysis transform: latents to hyper latents at a further 1/4
    /// resolution.
    pub fn hyper_analysis(&self, tape: &mut Tape<T>, y: MfVar) -> Result<MfVar> {
        let s = tape.shape(y.hf).to_vec();
        let (low, req) = match y.lf {
            Some(l) => (tape.shape(l).to_vec(), 4),
            None => (s.clone(), 4),
        };
        if low.len() != 4 || low[2] < req || low[3] < req || low[2] % req != 0 || low[3] % req != 0 {
            return Err(Error::InvalidShape {
                shape: low,
                reason: format!(
                    "lowest-resolution latent must have spatial dims that are multiples of {req}; use an input whose sides are multiples of {}",
                    super::arch::SPATIAL_MULTIPLE
                ),
            });
        }
        self.hyper.analysis(tape, y)
    }

    /// Hyper synthesis transform: hyper latents to side information with
    /// twice the latent channel count, aligned with the latents.
    pub fn hyper_synthesis(&self, tape: &mut Tape<T>, z: MfVar) -> Result<MfVar> {
        self.hyper.synthesis(tape, z)
    }

    /// Causal context features of one band.
    pub fn context(&self, tape: &mut Tape<T>, band: Band, y_hat: Var) -> Result<Var> {
        let b = self
            .band(band)
            .ok_or_else(|| Error::Config("model has no LF band".into()))?;
        b.context.forward(tape, y_hat)
    }

    pub fn estimate(&self, tape: &mut Tape<T>, band: Band, psi: Var, phi: Var) -> Result<(Var, Var)> {
        let b = self
            .band(band)
            .ok_or_else(|| Error::Config("model has no LF band".into()))?;
        b.estimator.forward(tape, psi, phi)
    }

    fn quantize_mf(&self, tape: &mut Tape<T>, x: MfVar, q: Quantizer, rng: &mut impl Rng) -> Result<MfVar> {
        let hf = q.apply(tape, x.hf, rng)?;
        let lf = match x.lf {
            Some(v) => Some(q.apply(tape, v, rng)?),
            None => None,
        };
        Ok(MfVar { hf, lf })
    }

    /// One pass through the whole model. `Quantizer::TrainNoise` gives the
    /// differentiable training relaxation; `Quantizer::TestRound` gives the
    /// values an actual codec would produce.
    pub fn forward(&self, tape: &mut Tape<T>, x: Var, q: Quantizer, rng: &mut impl Rng) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let y = self.analysis(tape, x)?;
        let y_hat = self.quantize_mf(tape, y, q, rng)?;
        let hyper_in = match cfg.hyper_input {
            HyperInput::Quantized => y_hat,
            HyperInput::PreQuantization => y,
        };
        let z = self.hyper_analysis(tape, hyper_in)?;
        let z_hat = self.quantize_mf(tape, z, q, rng)?;
        let psi = self.hyper_synthesis(tape, z_hat)?;
        let ctx_in = match (q, cfg.context_input) {
            (Quantizer::TrainNoise, ContextInput::Noisy) => y_hat,
            _ => MfVar {
                hf: tape.round(y.hf),
                lf: y.lf.map(|v| tape.round(v)),
            },
        };

        let mut mu = Vec::new();
        let mut sigma = Vec::new();
        let mut lik_y = Vec::new();
        let mut lik_z = Vec::new();
        let mut rates = Vec::new();
        let bands = [
            (Band::Hf, Some(y_hat.hf), Some(z_hat.hf), Some(psi.hf), Some(ctx_in.hf)),
            (Band::Lf, y_hat.lf, z_hat.lf, psi.lf, ctx_in.lf),
        ];
        for (band, yb, zb, pb, cb) in bands {
            let (Some(yb), Some(zb), Some(pb), Some(cb)) = (yb, zb, pb, cb) else {
                continue;
            };
            let bm = self.band(band).ok_or_else(|| Error::Config("band mismatch".into()))?;
            let phi = bm.context.forward(tape, cb)?;
            let (m, s) = bm.estimator.forward(tape, pb, phi)?;
            if tape.shape(m) != tape.shape(yb) {
                return Err(Error::ShapeMismatch {
                    lhs: tape.shape(m).to_vec(),
                    rhs: tape.shape(yb).to_vec(),
                    context: "entropy parameters vs latents",
                });
            }
            let ly = gaussian_likelihood(tape, yb, m, s)?;
            let lz = bm.prior.likelihood(tape, zb)?;
            let r = rate_bits(tape, &[ly, lz])?;
            mu.push(m);
            sigma.push(s);
            lik_y.push(ly);
            lik_z.push(lz);
            rates.push(r);
        }
        let x_hat = self.synthesis(tape, y_hat)?;
        let pair = |v: &[Var]| MfVar {
            hf: v[0],
            lf: v.get(1).copied(),
        };
        let rate = match rates.get(1) {
            Some(&r) => tape.add(rates[0], r)?,
            None => rates[0],
        };
        Ok(ForwardOutput {
            y,
            y_hat,
            z_hat,
            mu: pair(&mu),
            sigma: pair(&sigma),
            lik_y: pair(&lik_y),
            lik_z: pair(&lik_z),
            x_hat,
            rate_hf: rates[0],
            rate_lf: rates.get(1).copied(),
            rate,
        })
    }

    /// Analytic FLOPs of the complete model for a `[batch, 3, h, w]` input.
    pub fn count_flops(&self, batch: usize, h: usize, w: usize) -> FlopReport {
        let mut report = FlopReport::default();
        let mut c = Counter {
            report: &mut report,
            batch: batch as u64,
        };
        let y = self.enc.count(&mut c, "enc", SigDims::Plain(3, (h, w)));
        let z = match &self.hyper {
            Hyper::Joint { enc, .. } => enc.count(&mut c, "hyper_enc", y),
            Hyper::Split { hf, lf } => split_count(&mut c, "hyper_enc", y, &hf.0, lf.as_ref().map(|l| &l.0)),
        };
        match &self.hyper {
            Hyper::Joint { dec, .. } => dec.count(&mut c, "hyper_dec", z),
            Hyper::Split { hf, lf } => split_count(&mut c, "hyper_dec", z, &hf.1, lf.as_ref().map(|l| &l.1)),
        };
        let SigDims::Mf { hf: yh, lf: yl } = y else {
            unreachable!("encoder produces a multi-frequency signal")
        };
        for (band, dims, name) in [(Some(&self.hf), Some(yh), "hf"), (self.lf.as_ref(), yl, "lf")] {
            let (Some(bm), Some((_, hw))) = (band, dims) else {
                continue;
            };
            c.masked(&format!("cm_{name}"), &bm.context, hw);
            for (i, l) in bm.estimator.layers.iter().enumerate() {
                c.conv(&format!("pe_{name}.{i}"), l, hw);
            }
        }
        self.dec.count(&mut c, "dec", y);
        report
    }

    pub fn latent_dims(&self, h: usize, w: usize) -> ((usize, Hw), Option<(usize, Hw)>) {
        let (mh, ml) = self.config.latent_split();
        let hf = (mh, (h / 16, w / 16));
        let lf = (ml > 0).then_some((ml, (h / 32, w / 32)));
        (hf, lf)
    }
}

fn split_count<T: Real>(c: &mut Counter, name: &str, x: SigDims, hf: &Chain<T>, lf: Option<&Chain<T>>) -> SigDims {
    let SigDims::Mf { hf: xh, lf: xl } = x else {
        unreachable!("hyper networks take multi-frequency signals")
    };
    let h = hf.count(c, &join(name, "hf"), SigDims::Mf { hf: xh, lf: None });
    let l = match (lf, xl) {
        (Some(chain), Some(xl)) => Some(chain.count(c, &join(name, "lf"), SigDims::Mf { hf: xl, lf: None })),
        _ => None,
    };
    let first = |d: SigDims| match d {
        SigDims::Mf { hf, .. } => hf,
        SigDims::Plain(c, hw) => (c, hw),
    };
    SigDims::Mf {
        hf: first(h),
        lf: l.map(first),
    }
}

impl<T: Real> Module<T> for CodecModel<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.enc.visit(&join(prefix, "enc"), f);
        self.dec.visit(&join(prefix, "dec"), f);
        self.hyper.visit(&join(prefix, "hyper"), f);
        self.hf.visit(&join(prefix, "band_hf"), f);
        if let Some(lf) = &self.lf {
            lf.visit(&join(prefix, "band_lf"), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.enc.visit_mut(&join(prefix, "enc"), f);
        self.dec.visit_mut(&join(prefix, "dec"), f);
        self.hyper.visit_mut(&join(prefix, "hyper"), f);
        self.hf.visit_mut(&join(prefix, "band_hf"), f);
        if let Some(lf) = &mut self.lf {
            lf.visit_mut(&join(prefix, "band_lf"), f);
        }
    }
}
