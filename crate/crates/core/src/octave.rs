//! Multi-frequency feature maps and the octave convolution units built on
//! them.
//!
//! A multi-frequency map is a high-frequency (HF) tensor at full resolution
//! plus an optional low-frequency (LF) tensor at half resolution. A ratio
//! `alpha` of the channels lives in the LF part; with `alpha == 0` the LF part
//! is absent and every unit collapses to its vanilla counterpart.

use crate::error::{Error, Result};
use crate::layers::{join, ActKind, Activation, Conv2d, Init, Module, Param, TConv2d};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `(hf, lf)` channel counts for `c` channels at LF ratio `alpha`, with
/// `lf = round_half_up(alpha * c)`.
pub fn split_channels(c: usize, alpha: f64) -> Result<(usize, usize)> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha must lie in [0, 1), got {alpha}")));
    }
    let lf = (alpha * c as f64 + 0.5).floor() as usize;
    let hf = c - lf;
    if alpha > 0.0 && (lf == 0 || hf == 0) {
        return Err(Error::Config(format!(
            "alpha {alpha} leaves an empty band for {c} channels"
        )));
    }
    Ok((hf, lf))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MfTensor<T: Real = f32> {
    pub hf: Tensor<T>,
    pub lf: Option<Tensor<T>>,
}

impl<T: Real> MfTensor<T> {
    pub fn new(hf: Tensor<T>, lf: Option<Tensor<T>>) -> Result<Self> {
        check_pair(hf.shape(), lf.as_ref().map(|t| t.shape()))?;
        Ok(Self { hf, lf })
    }

    pub fn channels(&self) -> usize {
        self.hf.shape()[1] + self.lf.as_ref().map_or(0, |t| t.shape()[1])
    }

    pub fn numel(&self) -> usize {
        self.hf.numel() + self.lf.as_ref().map_or(0, |t| t.numel())
    }

    pub fn alpha(&self) -> f64 {
        self.lf
            .as_ref()
            .map_or(0.0, |t| t.shape()[1] as f64 / self.channels() as f64)
    }

    pub fn constant(&self, tape: &mut Tape<T>) -> MfVar {
        MfVar {
            hf: tape.constant(self.hf.clone()),
            lf: self.lf.as_ref().map(|t| tape.constant(t.clone())),
        }
    }

    pub fn input(&self, tape: &mut Tape<T>) -> MfVar {
        MfVar {
            hf: tape.input(self.hf.clone()),
            lf: self.lf.as_ref().map(|t| tape.input(t.clone())),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            hf: self.hf.map(&f),
            lf: self.lf.as_ref().map(|t| t.map(&f)),
        }
    }
}

/// A multi-frequency value on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MfVar {
    pub hf: Var,
    pub lf: Option<Var>,
}

impl MfVar {
    pub fn value<T: Real>(&self, tape: &Tape<T>) -> MfTensor<T> {
        MfTensor {
            hf: tape.value(self.hf).clone(),
            lf: self.lf.map(|v| tape.value(v).clone()),
        }
    }

    pub fn check<T: Real>(&self, tape: &Tape<T>) -> Result<()> {
        check_pair(tape.shape(self.hf), self.lf.map(|v| tape.shape(v)))
    }
}

fn check_pair(hf: &[usize], lf: Option<&[usize]>) -> Result<()> {
    let [n, _, h, w] = dims(hf)?;
    if let Some(lf) = lf {
        let [ln, _, lh, lw] = dims(lf)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::InvalidShape {
                shape: hf.to_vec(),
                reason: "HF spatial dims must be even".into(),
            });
        }
        if ln != n || lh * 2 != h || lw * 2 != w {
            return Err(Error::ShapeMismatch {
                lhs: hf.to_vec(),
                rhs: lf.to_vec(),
                context: "LF must be half the HF resolution",
            });
        }
    }
    Ok(())
}

fn dims(shape: &[usize]) -> Result<[usize; 4]> {
    match shape {
        &[n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "expected a 4-d NCHW tensor".into(),
        }),
    }
}

fn expect_channels<T: Real>(tape: &Tape<T>, v: Var, c: usize, context: &'static str) -> Result<()> {
    let shape = tape.shape(v);
    if shape.get(1) != Some(&c) {
        return Err(Error::ShapeMismatch {
            lhs: shape.to_vec(),
            rhs: vec![c],
            context,
        });
    }
    Ok(())
}

fn expect_band(lf: Option<Var>, want: bool) -> Result<()> {
    if lf.is_some() != want {
        return Err(Error::Config(format!(
            "unit {} an LF band but the input {}",
            if want { "expects" } else { "has no" },
            if lf.is_some() { "has one" } else { "has none" }
        )));
    }
    Ok(())
}

/// Shape description shared by every octave unit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnitSpec {
    pub c_in: usize,
    pub c_out: usize,
    /// Kernel size of the intra-frequency kernels.
    pub k: usize,
    /// Kernel size of the stride-2 inter-frequency kernels.
    pub inter_k: usize,
    pub stride: usize,
    pub alpha: f64,
    pub act: ActKind,
}

impl UnitSpec {
    fn check(&self) -> Result<()> {
        if self.stride != 1 && self.stride != 2 {
            return Err(Error::Config(format!("stride {} not in {{1, 2}}", self.stride)));
        }
        if self.k.is_multiple_of(2) || self.inter_k.is_multiple_of(2) {
            return Err(Error::Config("kernel sizes must be odd".into()));
        }
        Ok(())
    }
}

fn visit_opt<T: Real, M: Module<T>>(m: &Option<M>, prefix: &str, name: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
    if let Some(m) = m {
        m.visit(&join(prefix, name), f);
    }
}

fn visit_opt_mut<T: Real, M: Module<T>>(
    m: &mut Option<M>,
    prefix: &str,
    name: &str,
    f: &mut dyn FnMut(&str, &mut Param<T>),
) {
    if let Some(m) = m {
        m.visit_mut(&join(prefix, name), f);
    }
}

/// Inter-frequency paths of the generalized units.
#[derive(Clone, Debug)]
pub struct Cross<T: Real> {
    pub h2l: Conv2d<T>,
    pub l2h: TConv2d<T>,
    pub act_h2l: Activation<T>,
    pub act_l2h: Activation<T>,
}

impl<T: Real> Module<T> for Cross<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.h2l.visit(&join(prefix, "h2l"), f);
        self.l2h.visit(&join(prefix, "l2h"), f);
        self.act_h2l.visit(&join(prefix, "act_h2l"), f);
        self.act_l2h.visit(&join(prefix, "act_l2h"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.h2l.visit_mut(&join(prefix, "h2l"), f);
        self.l2h.visit_mut(&join(prefix, "l2h"), f);
        self.act_h2l.visit_mut(&join(prefix, "act_h2l"), f);
        self.act_l2h.visit_mut(&join(prefix, "act_l2h"), f);
    }
}

/// Generalized octave convolution. The inter-frequency paths read the
/// intra-frequency outputs, not the unit inputs:
///
/// ```text
/// Y^HH = act(f(X^H))        Y^LL = act(f(X^L))
/// Y^H  = Y^HH + act(up(Y^LL))
/// Y^L  = Y^LL + act(down(Y^HH))
/// ```
#[derive(Clone, Debug)]
pub struct GoConv<T: Real> {
    pub hh: Conv2d<T>,
    pub act_hh: Activation<T>,
    pub ll: Option<(Conv2d<T>, Activation<T>)>,
    pub cross: Option<Cross<T>>,
    pub spec: UnitSpec,
}

impl<T: Real> GoConv<T> {
    pub fn new(spec: UnitSpec, init: &mut Init) -> Result<Self> {
        spec.check()?;
        let (hi, li) = split_channels(spec.c_in, spec.alpha)?;
        let (ho, lo) = split_channels(spec.c_out, spec.alpha)?;
        let hh = Conv2d::new(hi, ho, spec.k, spec.stride, init);
        let act_hh = spec.act.build(ho);
        let (ll, cross) = if lo > 0 {
            let ll = (Conv2d::new(li, lo, spec.k, spec.stride, init), spec.act.build(lo));
            let cross = Cross {
                h2l: Conv2d::new(ho, lo, spec.inter_k, 2, init),
                l2h: TConv2d::new(lo, ho, spec.inter_k, 2, init),
                act_h2l: spec.act.build(lo),
                act_l2h: spec.act.build(ho),
            };
            (Some(ll), Some(cross))
        } else {
            (None, None)
        };
        Ok(Self {
            hh,
            act_hh,
            ll,
            cross,
            spec,
        })
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: MfVar) -> Result<MfVar> {
        x.check(tape)?;
        expect_band(x.lf, self.ll.is_some())?;
        expect_channels(tape, x.hf, self.hh.c_in(), "goconv HF input")?;
        let yhh = self.hh.forward(tape, x.hf)?;
        let yhh = self.act_hh.forward(tape, yhh)?;
        let (Some((ll, act_ll)), Some(cross), Some(xl)) = (&self.ll, &self.cross, x.lf) else {
            return Ok(MfVar { hf: yhh, lf: None });
        };
        expect_channels(tape, xl, ll.c_in(), "goconv LF input")?;
        let yll = ll.forward(tape, xl)?;
        let yll = act_ll.forward(tape, yll)?;
        let up = cross.l2h.forward(tape, yll)?;
        let up = cross.act_l2h.forward(tape, up)?;
        let down = cross.h2l.forward(tape, yhh)?;
        let down = cross.act_h2l.forward(tape, down)?;
        Ok(MfVar {
            hf: tape.add(yhh, up)?,
            lf: Some(tape.add(yll, down)?),
        })
    }
}

impl<T: Real> Module<T> for GoConv<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.hh.visit(&join(prefix, "hh"), f);
        self.act_hh.visit(&join(prefix, "act_hh"), f);
        if let Some((ll, act)) = &self.ll {
            ll.visit(&join(prefix, "ll"), f);
            act.visit(&join(prefix, "act_ll"), f);
        }
        visit_opt(&self.cross, prefix, "cross", f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.hh.visit_mut(&join(prefix, "hh"), f);
        self.act_hh.visit_mut(&join(prefix, "act_hh"), f);
        if let Some((ll, act)) = &mut self.ll {
            ll.visit_mut(&join(prefix, "ll"), f);
            act.visit_mut(&join(prefix, "act_ll"), f);
        }
        visit_opt_mut(&mut self.cross, prefix, "cross", f);
    }
}

/// Generalized octave transposed convolution. Each branch is activated before
/// it enters a (transposed) convolution:
///
/// ```text
/// X^HH = g(act(Y^H))        X^LL = g(act(Y^L))
/// X^H  = X^HH + up(act(X^LL))
/// X^L  = X^LL + down(act(X^HH))
/// ```
#[derive(Clone, Debug)]
pub struct GoTConv<T: Real> {
    pub act_h: Activation<T>,
    pub hh: TConv2d<T>,
    pub ll: Option<(Activation<T>, TConv2d<T>)>,
    pub cross: Option<Cross<T>>,
    pub spec: UnitSpec,
}

impl<T: Real> GoTConv<T> {
    pub fn new(spec: UnitSpec, init: &mut Init) -> Result<Self> {
        spec.check()?;
        let (hi, li) = split_channels(spec.c_in, spec.alpha)?;
        let (ho, lo) = split_channels(spec.c_out, spec.alpha)?;
        let act_h = spec.act.build(hi);
        let hh = TConv2d::new(hi, ho, spec.k, spec.stride, init);
        let (ll, cross) = if lo > 0 {
            let ll = (spec.act.build(li), TConv2d::new(li, lo, spec.k, spec.stride, init));
            let cross = Cross {
                h2l: Conv2d::new(ho, lo, spec.inter_k, 2, init),
                l2h: TConv2d::new(lo, ho, spec.inter_k, 2, init),
                act_h2l: spec.act.build(ho),
                act_l2h: spec.act.build(lo),
            };
            (Some(ll), Some(cross))
        } else {
            (None, None)
        };
        Ok(Self {
            act_h,
            hh,
            ll,
            cross,
            spec,
        })
    }

    pub fn forward(&self, tape: &mut Tape<T>, y: MfVar) -> Result<MfVar> {
        y.check(tape)?;
        expect_band(y.lf, self.ll.is_some())?;
        expect_channels(tape, y.hf, self.hh.c_in(), "gotconv HF input")?;
        let ah = self.act_h.forward(tape, y.hf)?;
        let xhh = self.hh.forward(tape, ah)?;
        let (Some((act_l, ll)), Some(cross), Some(yl)) = (&self.ll, &self.cross, y.lf) else {
            return Ok(MfVar { hf: xhh, lf: None });
        };
        expect_channels(tape, yl, ll.c_in(), "gotconv LF input")?;
        let al = act_l.forward(tape, yl)?;
        let xll = ll.forward(tape, al)?;
        let a = cross.act_l2h.forward(tape, xll)?;
        let up = cross.l2h.forward(tape, a)?;
        let a = cross.act_h2l.forward(tape, xhh)?;
        let down = cross.h2l.forward(tape, a)?;
        Ok(MfVar {
            hf: tape.add(xhh, up)?,
            lf: Some(tape.add(xll, down)?),
        })
    }
}

impl<T: Real> Module<T> for GoTConv<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.act_h.visit(&join(prefix, "act_h"), f);
        self.hh.visit(&join(prefix, "hh"), f);
        if let Some((act, ll)) = &self.ll {
            act.visit(&join(prefix, "act_l"), f);
            ll.visit(&join(prefix, "ll"), f);
        }
        visit_opt(&self.cross, prefix, "cross", f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.act_h.visit_mut(&join(prefix, "act_h"), f);
        self.hh.visit_mut(&join(prefix, "hh"), f);
        if let Some((act, ll)) = &mut self.ll {
            act.visit_mut(&join(prefix, "act_l"), f);
            ll.visit_mut(&join(prefix, "ll"), f);
        }
        visit_opt_mut(&mut self.cross, prefix, "cross", f);
    }
}

/// Entry unit from a plain image: `Y^H = act(f(X))`, `Y^L = act(down(Y^H))`.
#[derive(Clone, Debug)]
pub struct GoConvFirst<T: Real> {
    pub f: Conv2d<T>,
    pub act_h: Activation<T>,
    pub down: Option<(Conv2d<T>, Activation<T>)>,
    pub spec: UnitSpec,
}

impl<T: Real> GoConvFirst<T> {
    pub fn new(spec: UnitSpec, init: &mut Init) -> Result<Self> {
        spec.check()?;
        let (ho, lo) = split_channels(spec.c_out, spec.alpha)?;
        let f = Conv2d::new(spec.c_in, ho, spec.k, spec.stride, init);
        let act_h = spec.act.build(ho);
        let down = (lo > 0).then(|| (Conv2d::new(ho, lo, spec.inter_k, 2, init), spec.act.build(lo)));
        Ok(Self { f, act_h, down, spec })
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<MfVar> {
        let [_, _, h, w] = dims(tape.shape(x))?;
        let s = self.spec.stride;
        if self.down.is_some() && (h % (2 * s) != 0 || w % (2 * s) != 0) {
            return Err(Error::InvalidShape {
                shape: tape.shape(x).to_vec(),
                reason: format!("spatial dims must be multiples of {}", 2 * s),
            });
        }
        expect_channels(tape, x, self.f.c_in(), "goconv_first input")?;
        let yh = self.f.forward(tape, x)?;
        let yh = self.act_h.forward(tape, yh)?;
        let lf = match &self.down {
            Some((down, act)) => {
                let yl = down.forward(tape, yh)?;
                Some(act.forward(tape, yl)?)
            }
            None => None,
        };
        Ok(MfVar { hf: yh, lf })
    }
}

impl<T: Real> Module<T> for GoConvFirst<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.f.visit(&join(prefix, "f"), f);
        self.act_h.visit(&join(prefix, "act_h"), f);
        if let Some((down, act)) = &self.down {
            down.visit(&join(prefix, "down"), f);
            act.visit(&join(prefix, "act_down"), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.f.visit_mut(&join(prefix, "f"), f);
        self.act_h.visit_mut(&join(prefix, "act_h"), f);
        if let Some((down, act)) = &mut self.down {
            down.visit_mut(&join(prefix, "down"), f);
            act.visit_mut(&join(prefix, "act_down"), f);
        }
    }
}

/// Exit unit back to a plain image: `X = g(act(Y^H)) + up(act(g(act(Y^L))))`.
/// The sum itself is not activated.
#[derive(Clone, Debug)]
pub struct GoTConvLast<T: Real> {
    pub act_h: Activation<T>,
    pub hh: TConv2d<T>,
    pub ll: Option<LastLow<T>>,
    pub spec: UnitSpec,
}

#[derive(Clone, Debug)]
pub struct LastLow<T: Real> {
    pub act_l: Activation<T>,
    pub ll: TConv2d<T>,
    pub act_up: Activation<T>,
    pub up: TConv2d<T>,
}

impl<T: Real> GoTConvLast<T> {
    pub fn new(spec: UnitSpec, init: &mut Init) -> Result<Self> {
        spec.check()?;
        let (hi, li) = split_channels(spec.c_in, spec.alpha)?;
        let act_h = spec.act.build(hi);
        let hh = TConv2d::new(hi, spec.c_out, spec.k, spec.stride, init);
        let ll = (li > 0).then(|| LastLow {
            act_l: spec.act.build(li),
            ll: TConv2d::new(li, spec.c_out, spec.k, spec.stride, init),
            act_up: spec.act.build(spec.c_out),
            up: TConv2d::new(spec.c_out, spec.c_out, spec.inter_k, 2, init),
        });
        Ok(Self { act_h, hh, ll, spec })
    }

    pub fn forward(&self, tape: &mut Tape<T>, y: MfVar) -> Result<Var> {
        y.check(tape)?;
        expect_band(y.lf, self.ll.is_some())?;
        expect_channels(tape, y.hf, self.hh.c_in(), "gotconv_last HF input")?;
        let ah = self.act_h.forward(tape, y.hf)?;
        let xhh = self.hh.forward(tape, ah)?;
        let (Some(low), Some(yl)) = (&self.ll, y.lf) else {
            return Ok(xhh);
        };
        expect_channels(tape, yl, low.ll.c_in(), "gotconv_last LF input")?;
        let al = low.act_l.forward(tape, yl)?;
        let xll = low.ll.forward(tape, al)?;
        let a = low.act_up.forward(tape, xll)?;
        let up = low.up.forward(tape, a)?;
        tape.add(xhh, up)
    }
}

impl<T: Real> Module<T> for LastLow<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.act_l.visit(&join(prefix, "act_l"), f);
        self.ll.visit(&join(prefix, "ll"), f);
        self.act_up.visit(&join(prefix, "act_up"), f);
        self.up.visit(&join(prefix, "up"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.act_l.visit_mut(&join(prefix, "act_l"), f);
        self.ll.visit_mut(&join(prefix, "ll"), f);
        self.act_up.visit_mut(&join(prefix, "act_up"), f);
        self.up.visit_mut(&join(prefix, "up"), f);
    }
}

impl<T: Real> Module<T> for GoTConvLast<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.act_h.visit(&join(prefix, "act_h"), f);
        self.hh.visit(&join(prefix, "hh"), f);
        visit_opt(&self.ll, prefix, "low", f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.act_h.visit_mut(&join(prefix, "act_h"), f);
        self.hh.visit_mut(&join(prefix, "hh"), f);
        visit_opt_mut(&mut self.ll, prefix, "low", f);
    }
}

/// Kernels of the original octave unit, forward or transposed.
#[derive(Clone, Debug)]
pub struct OctKernels<K> {
    pub hh: K,
    pub ll: K,
    pub h2l: K,
    pub l2h: K,
}

impl<T: Real, K: Module<T>> Module<T> for OctKernels<K> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.hh.visit(&join(prefix, "hh"), f);
        self.ll.visit(&join(prefix, "ll"), f);
        self.h2l.visit(&join(prefix, "h2l"), f);
        self.l2h.visit(&join(prefix, "l2h"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.hh.visit_mut(&join(prefix, "hh"), f);
        self.ll.visit_mut(&join(prefix, "ll"), f);
        self.h2l.visit_mut(&join(prefix, "h2l"), f);
        self.l2h.visit_mut(&join(prefix, "l2h"), f);
    }
}

/// Original octave convolution with average pooling and nearest upsampling:
///
/// ```text
/// Y^H = act(f(X^H) + up(f(X^L)))
/// Y^L = act(f(X^L) + f(pool(X^H)))
/// ```
///
/// The input-side (first) form takes a plain tensor: `Y^H = f(X)`,
/// `Y^L = f(pool(X))`.
#[derive(Clone, Debug)]
pub struct OctConv<T: Real> {
    pub first: Option<(Conv2d<T>, Option<Conv2d<T>>)>,
    pub kernels: Option<OctKernels<Conv2d<T>>>,
    pub hf_only: Option<Conv2d<T>>,
    pub act_h: Activation<T>,
    pub act_l: Option<Activation<T>>,
    pub spec: UnitSpec,
}

impl<T: Real> OctConv<T> {
    pub fn new(spec: UnitSpec, init: &mut Init) -> Result<Self> {
        spec.check()?;
        let (hi, li) = split_channels(spec.c_in, spec.alpha)?;
        let (ho, lo) = split_channels(spec.c_out, spec.alpha)?;
        let (kernels, hf_only) = if lo > 0 {
            let k = OctKernels {
                hh: Conv2d::new(hi, ho, spec.k, spec.stride, init),
                ll: Conv2d::new(li, lo, spec.k, spec.stride, init),
                h2l: Conv2d::new(hi, lo, spec.k, spec.stride, init),
                l2h: Conv2d::new(li, ho, spec.k, spec.stride, init),
            };
            (Some(k), None)
        } else {
            (None, Some(Conv2d::new(hi, ho, spec.k, spec.stride, init)))
        };
        Ok(Self {
            first: None,
            kernels,
            hf_only,
            act_h: spec.act.build(ho),
            act_l: (lo > 0).then(|| spec.act.build(lo)),
            spec,
        })
    }

    pub fn new_first(spec: UnitSpec, init: &mut Init) -> Result<Self> {
        spec.check()?;
        let (ho, lo) = split_channels(spec.c_out, spec.alpha)?;
        let h = Conv2d::new(spec.c_in, ho, spec.k, spec.stride, init);
        let l = (lo > 0).then(|| Conv2d::new(spec.c_in, lo, spec.k, spec.stride, init));
        Ok(Self {
            first: Some((h, l)),
            kernels: None,
            hf_only: None,
            act_h: spec.act.build(ho),
            act_l: (lo > 0).then(|| spec.act.build(lo)),
            spec,
        })
    }

    fn finish(&self, tape: &mut Tape<T>, yh: Var, yl: Option<Var>) -> Result<MfVar> {
        let hf = self.act_h.forward(tape, yh)?;
        let lf = match (yl, &self.act_l) {
            (Some(v), Some(a)) => Some(a.forward(tape, v)?),
            _ => None,
        };
        Ok(MfVar { hf, lf })
    }

    pub fn forward_first(&self, tape: &mut Tape<T>, x: Var) -> Result<MfVar> {
        let Some((h, l)) = &self.first else {
            return Err(Error::Config("not an input-side octave unit".into()));
        };
        dims(tape.shape(x))?;
        expect_channels(tape, x, h.c_in(), "octconv_first input")?;
        let yh = h.forward(tape, x)?;
        let yl = match l {
            Some(l) => {
                let p = tape.avg_pool2(x)?;
                Some(l.forward(tape, p)?)
            }
            None => None,
        };
        self.finish(tape, yh, yl)
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: MfVar) -> Result<MfVar> {
        x.check(tape)?;
        if let Some(f) = &self.hf_only {
            expect_band(x.lf, false)?;
            expect_channels(tape, x.hf, f.c_in(), "octconv input")?;
            let yh = f.forward(tape, x.hf)?;
            return self.finish(tape, yh, None);
        }
        let Some(k) = &self.kernels else {
            return Err(Error::Config("input-side octave unit needs forward_first".into()));
        };
        expect_band(x.lf, true)?;
        let xl = x.lf.expect("checked");
        expect_channels(tape, x.hf, k.hh.c_in(), "octconv HF input")?;
        expect_channels(tape, xl, k.ll.c_in(), "octconv LF input")?;
        let hh = k.hh.forward(tape, x.hf)?;
        let lh = k.l2h.forward(tape, xl)?;
        let lh = tape.upsample_nearest2(lh)?;
        let yh = tape.add(hh, lh)?;
        let ll = k.ll.forward(tape, xl)?;
        let pooled = tape.avg_pool2(x.hf)?;
        let hl = k.h2l.forward(tape, pooled)?;
        let yl = tape.add(ll, hl)?;
        self.finish(tape, yh, Some(yl))
    }
}

impl<T: Real> Module<T> for OctConv<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        if let Some((h, l)) = &self.first {
            h.visit(&join(prefix, "h"), f);
            visit_opt(l, prefix, "l", f);
        }
        visit_opt(&self.kernels, prefix, "k", f);
        visit_opt(&self.hf_only, prefix, "hh", f);
        self.act_h.visit(&join(prefix, "act_h"), f);
        visit_opt(&self.act_l, prefix, "act_l", f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        if let Some((h, l)) = &mut self.first {
            h.visit_mut(&join(prefix, "h"), f);
            visit_opt_mut(l, prefix, "l", f);
        }
        visit_opt_mut(&mut self.kernels, prefix, "k", f);
        visit_opt_mut(&mut self.hf_only, prefix, "hh", f);
        self.act_h.visit_mut(&join(prefix, "act_h"), f);
        visit_opt_mut(&mut self.act_l, prefix, "act_l", f);
    }
}

/// Original octave transposed convolution. Activations are applied to the
/// inputs, so a chain of units is activated once between layers:
///
/// ```text
/// X^H = g(a(Y^H)) + up(g(a(Y^L)))
/// X^L = g(a(Y^L)) + g(pool(a(Y^H)))
/// ```
///
/// The output-side (last) form returns `g(a(Y^H)) + up(g(a(Y^L)))` as a plain
/// tensor.
#[derive(Clone, Debug)]
pub struct OctTConv<T: Real> {
    pub kernels: Option<OctKernels<TConv2d<T>>>,
    pub last: Option<(TConv2d<T>, TConv2d<T>)>,
    pub hf_only: Option<TConv2d<T>>,
    pub act_h: Activation<T>,
    pub act_l: Option<Activation<T>>,
    pub spec: UnitSpec,
}

impl<T: Real> OctTConv<T> {
    pub fn new(spec: UnitSpec, init: &mut Init) -> Result<Self> {
        spec.check()?;
        let (hi, li) = split_channels(spec.c_in, spec.alpha)?;
        let (ho, lo) = split_channels(spec.c_out, spec.alpha)?;
        let (kernels, hf_only) = if lo > 0 {
            let k = OctKernels {
                hh: TConv2d::new(hi, ho, spec.k, spec.stride, init),
                ll: TConv2d::new(li, lo, spec.k, spec.stride, init),
                h2l: TConv2d::new(hi, lo, spec.k, spec.stride, init),
                l2h: TConv2d::new(li, ho, spec.k, spec.stride, init),
            };
            (Some(k), None)
        } else {
            (None, Some(TConv2d::new(hi, ho, spec.k, spec.stride, init)))
        };
        Ok(Self {
            kernels,
            last: None,
            hf_only,
            act_h: spec.act.build(hi),
            act_l: (li > 0).then(|| spec.act.build(li)),
            spec,
        })
    }

    pub fn new_last(spec: UnitSpec, init: &mut Init) -> Result<Self> {
        spec.check()?;
        let (hi, li) = split_channels(spec.c_in, spec.alpha)?;
        if li == 0 {
            return Ok(Self {
                kernels: None,
                last: None,
                hf_only: Some(TConv2d::new(hi, spec.c_out, spec.k, spec.stride, init)),
                act_h: spec.act.build(hi),
                act_l: None,
                spec,
            });
        }
        Ok(Self {
            kernels: None,
            last: Some((
                TConv2d::new(hi, spec.c_out, spec.k, spec.stride, init),
                TConv2d::new(li, spec.c_out, spec.k, spec.stride, init),
            )),
            hf_only: None,
            act_h: spec.act.build(hi),
            act_l: Some(spec.act.build(li)),
            spec,
        })
    }

    fn activate(&self, tape: &mut Tape<T>, y: MfVar) -> Result<(Var, Option<Var>)> {
        y.check(tape)?;
        expect_band(y.lf, self.act_l.is_some())?;
        let ah = self.act_h.forward(tape, y.hf)?;
        let al = match (y.lf, &self.act_l) {
            (Some(v), Some(a)) => Some(a.forward(tape, v)?),
            _ => None,
        };
        Ok((ah, al))
    }

    pub fn forward(&self, tape: &mut Tape<T>, y: MfVar) -> Result<MfVar> {
        let (ah, al) = self.activate(tape, y)?;
        if let Some(g) = &self.hf_only {
            expect_channels(tape, ah, g.c_in(), "octtconv input")?;
            return Ok(MfVar {
                hf: g.forward(tape, ah)?,
                lf: None,
            });
        }
        let (Some(k), Some(al)) = (&self.kernels, al) else {
            return Err(Error::Config("output-side octave unit needs forward_last".into()));
        };
        expect_channels(tape, ah, k.hh.c_in(), "octtconv HF input")?;
        expect_channels(tape, al, k.ll.c_in(), "octtconv LF input")?;
        let hh = k.hh.forward(tape, ah)?;
        let lh = k.l2h.forward(tape, al)?;
        let lh = tape.upsample_nearest2(lh)?;
        let xh = tape.add(hh, lh)?;
        let ll = k.ll.forward(tape, al)?;
        let pooled = tape.avg_pool2(ah)?;
        let hl = k.h2l.forward(tape, pooled)?;
        let xl = tape.add(ll, hl)?;
        Ok(MfVar { hf: xh, lf: Some(xl) })
    }

    pub fn forward_last(&self, tape: &mut Tape<T>, y: MfVar) -> Result<Var> {
        let (ah, al) = self.activate(tape, y)?;
        if let Some(g) = &self.hf_only {
            expect_channels(tape, ah, g.c_in(), "octtconv_last input")?;
            return g.forward(tape, ah);
        }
        let (Some((gh, gl)), Some(al)) = (&self.last, al) else {
            return Err(Error::Config("not an output-side octave unit".into()));
        };
        expect_channels(tape, ah, gh.c_in(), "octtconv_last HF input")?;
        expect_channels(tape, al, gl.c_in(), "octtconv_last LF input")?;
        let xh = gh.forward(tape, ah)?;
        let xl = gl.forward(tape, al)?;
        let up = tape.upsample_nearest2(xl)?;
        tape.add(xh, up)
    }
}

impl<T: Real> Module<T> for OctTConv<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        visit_opt(&self.kernels, prefix, "k", f);
        if let Some((h, l)) = &self.last {
            h.visit(&join(prefix, "h"), f);
            l.visit(&join(prefix, "l"), f);
        }
        visit_opt(&self.hf_only, prefix, "hh", f);
        self.act_h.visit(&join(prefix, "act_h"), f);
        visit_opt(&self.act_l, prefix, "act_l", f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        visit_opt_mut(&mut self.kernels, prefix, "k", f);
        if let Some((h, l)) = &mut self.last {
            h.visit_mut(&join(prefix, "h"), f);
            l.visit_mut(&join(prefix, "l"), f);
        }
        visit_opt_mut(&mut self.hf_only, prefix, "hh", f);
        self.act_h.visit_mut(&join(prefix, "act_h"), f);
        visit_opt_mut(&mut self.act_l, prefix, "act_l", f);
    }
}
