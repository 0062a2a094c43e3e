//! Octave units wrapped into uniform pipeline stages.

use crate::error::{Error, Result};
use crate::layers::{join, Activation, Module, Param};
use crate::octave::{GoConv, GoConvFirst, GoTConv, GoTConvLast, MfVar, OctConv, OctTConv};
use crate::real::Real;
use crate::tape::{Tape, Var};

use super::flops::{Counter, Hw};

/// Value flowing between stages: a plain image-like tensor or a
/// multi-frequency pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Signal {
    Plain(Var),
    Mf(MfVar),
}

impl Signal {
    pub fn mf(self) -> Result<MfVar> {
        match self {
            Signal::Mf(v) => Ok(v),
            Signal::Plain(_) => Err(Error::Config("expected a multi-frequency signal".into())),
        }
    }

    pub fn plain(self) -> Result<Var> {
        match self {
            Signal::Plain(v) => Ok(v),
            Signal::Mf(_) => Err(Error::Config("expected a plain signal".into())),
        }
    }
}

/// Shape of a [`Signal`] without the batch axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SigDims {
    Plain(usize, Hw),
    Mf { hf: (usize, Hw), lf: Option<(usize, Hw)> },
}

impl SigDims {
    fn mf(self) -> ((usize, Hw), Option<(usize, Hw)>) {
        match self {
            SigDims::Mf { hf, lf } => (hf, lf),
            SigDims::Plain(c, hw) => ((c, hw), None),
        }
    }
}

#[derive(Clone, Debug)]
pub enum Unit<T: Real> {
    GoFirst(GoConvFirst<T>),
    Go(GoConv<T>),
    GoT(GoTConv<T>),
    GoTLast(GoTConvLast<T>),
    OctFirst(OctConv<T>),
    Oct(OctConv<T>),
    OctT(OctTConv<T>),
    OctTLast(OctTConv<T>),
}

/// One activation per band, applied outside a unit.
#[derive(Clone, Debug)]
pub struct BandAct<T: Real> {
    pub hf: Activation<T>,
    pub lf: Option<Activation<T>>,
}

impl<T: Real> BandAct<T> {
    fn forward(&self, tape: &mut Tape<T>, x: MfVar) -> Result<MfVar> {
        let hf = self.hf.forward(tape, x.hf)?;
        let lf = match (x.lf, &self.lf) {
            (Some(v), Some(a)) => Some(a.forward(tape, v)?),
            (None, None) => None,
            _ => return Err(Error::Config("band activation does not match the input bands".into())),
        };
        Ok(MfVar { hf, lf })
    }

    fn count(&self, c: &mut Counter, prefix: &str, dims: SigDims) {
        let (hf, lf) = dims.mf();
        c.act(&join(prefix, "hf"), &self.hf, hf.1);
        if let (Some(a), Some(lf)) = (&self.lf, lf) {
            c.act(&join(prefix, "lf"), a, lf.1);
        }
    }
}

impl<T: Real> Module<T> for BandAct<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.hf.visit(&join(prefix, "hf"), f);
        if let Some(a) = &self.lf {
            a.visit(&join(prefix, "lf"), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.hf.visit_mut(&join(prefix, "hf"), f);
        if let Some(a) = &mut self.lf {
            a.visit_mut(&join(prefix, "lf"), f);
        }
    }
}

#[derive(Clone, Debug)]
pub struct Stage<T: Real> {
    pub pre: Option<BandAct<T>>,
    pub unit: Unit<T>,
    pub post: Option<BandAct<T>>,
}

impl<T: Real> Stage<T> {
    pub fn new(unit: Unit<T>) -> Self {
        Self {
            pre: None,
            unit,
            post: None,
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Signal) -> Result<Signal> {
        let x = match (&self.pre, x) {
            (Some(a), Signal::Mf(v)) => Signal::Mf(a.forward(tape, v)?),
            (_, x) => x,
        };
        let y = match &self.unit {
            Unit::GoFirst(u) => Signal::Mf(u.forward(tape, x.plain()?)?),
            Unit::Go(u) => Signal::Mf(u.forward(tape, x.mf()?)?),
            Unit::GoT(u) => Signal::Mf(u.forward(tape, x.mf()?)?),
            Unit::GoTLast(u) => Signal::Plain(u.forward(tape, x.mf()?)?),
            Unit::OctFirst(u) => Signal::Mf(u.forward_first(tape, x.plain()?)?),
            Unit::Oct(u) => Signal::Mf(u.forward(tape, x.mf()?)?),
            Unit::OctT(u) => Signal::Mf(u.forward(tape, x.mf()?)?),
            Unit::OctTLast(u) => Signal::Plain(u.forward_last(tape, x.mf()?)?),
        };
        match (&self.post, y) {
            (Some(a), Signal::Mf(v)) => Ok(Signal::Mf(a.forward(tape, v)?)),
            (_, y) => Ok(y),
        }
    }

    pub(crate) fn count(&self, c: &mut Counter, prefix: &str, dims: SigDims) -> SigDims {
        if let Some(a) = &self.pre {
            a.count(c, &join(prefix, "pre"), dims);
        }
        let out = count_unit(&self.unit, c, prefix, dims);
        if let Some(a) = &self.post {
            a.count(c, &join(prefix, "post"), out);
        }
        out
    }
}

fn count_unit<T: Real>(unit: &Unit<T>, c: &mut Counter, p: &str, dims: SigDims) -> SigDims {
    let n = |s: &str| join(p, s);
    let ((hc, hhw), lf) = dims.mf();
    match unit {
        Unit::GoFirst(u) => {
            let yh = c.conv(&n("f"), &u.f, hhw);
            c.act(&n("act_h"), &u.act_h, yh);
            let lf = u.down.as_ref().map(|(d, a)| {
                let yl = c.conv(&n("down"), d, yh);
                c.act(&n("act_down"), a, yl);
                (d.c_out(), yl)
            });
            SigDims::Mf {
                hf: (u.f.c_out(), yh),
                lf,
            }
        }
        Unit::Go(u) => {
            let yh = c.conv(&n("hh"), &u.hh, hhw);
            c.act(&n("act_hh"), &u.act_hh, yh);
            let ho = u.hh.c_out();
            let lf = match (&u.ll, &u.cross, lf) {
                (Some((ll, act)), Some(x), Some((_, lhw))) => {
                    let yl = c.conv(&n("ll"), ll, lhw);
                    c.act(&n("act_ll"), act, yl);
                    let up = c.tconv(&n("cross.l2h"), &x.l2h, yl);
                    c.act(&n("cross.act_l2h"), &x.act_l2h, up);
                    let down = c.conv(&n("cross.h2l"), &x.h2l, yh);
                    c.act(&n("cross.act_h2l"), &x.act_h2l, down);
                    c.add(ho, yh);
                    c.add(ll.c_out(), yl);
                    Some((ll.c_out(), yl))
                }
                _ => None,
            };
            SigDims::Mf { hf: (ho, yh), lf }
        }
        Unit::GoT(u) => {
            c.act(&n("act_h"), &u.act_h, hhw);
            let xh = c.tconv(&n("hh"), &u.hh, hhw);
            let ho = u.hh.c_out();
            let lf = match (&u.ll, &u.cross, lf) {
                (Some((act, ll)), Some(x), Some((_, lhw))) => {
                    c.act(&n("act_l"), act, lhw);
                    let xl = c.tconv(&n("ll"), ll, lhw);
                    c.act(&n("cross.act_l2h"), &x.act_l2h, xl);
                    c.tconv(&n("cross.l2h"), &x.l2h, xl);
                    c.act(&n("cross.act_h2l"), &x.act_h2l, xh);
                    c.conv(&n("cross.h2l"), &x.h2l, xh);
                    c.add(ho, xh);
                    c.add(ll.c_out(), xl);
                    Some((ll.c_out(), xl))
                }
                _ => None,
            };
            SigDims::Mf { hf: (ho, xh), lf }
        }
        Unit::GoTLast(u) => {
            c.act(&n("act_h"), &u.act_h, hhw);
            let xh = c.tconv(&n("hh"), &u.hh, hhw);
            if let (Some(low), Some((_, lhw))) = (&u.ll, lf) {
                c.act(&n("low.act_l"), &low.act_l, lhw);
                let xl = c.tconv(&n("low.ll"), &low.ll, lhw);
                c.act(&n("low.act_up"), &low.act_up, xl);
                c.tconv(&n("low.up"), &low.up, xl);
                c.add(u.hh.c_out(), xh);
            }
            SigDims::Plain(u.hh.c_out(), xh)
        }
        Unit::OctFirst(u) => {
            let (h, l) = u.first.as_ref().expect("input-side unit");
            let yh = c.conv(&n("h"), h, hhw);
            c.act(&n("act_h"), &u.act_h, yh);
            let lf = l.as_ref().map(|l| {
                c.resample(hc, (hhw.0 / 2, hhw.1 / 2));
                let yl = c.conv(&n("l"), l, (hhw.0 / 2, hhw.1 / 2));
                if let Some(a) = &u.act_l {
                    c.act(&n("act_l"), a, yl);
                }
                (l.c_out(), yl)
            });
            SigDims::Mf {
                hf: (h.c_out(), yh),
                lf,
            }
        }
        Unit::Oct(u) => {
            if let Some(f) = &u.hf_only {
                let yh = c.conv(&n("hh"), f, hhw);
                c.act(&n("act_h"), &u.act_h, yh);
                return SigDims::Mf {
                    hf: (f.c_out(), yh),
                    lf: None,
                };
            }
            let k = u.kernels.as_ref().expect("octave kernels");
            let (_, lhw) = lf.expect("LF band");
            let yh = c.conv(&n("k.hh"), &k.hh, hhw);
            c.conv(&n("k.l2h"), &k.l2h, lhw);
            c.resample(k.l2h.c_out(), yh);
            let yl = c.conv(&n("k.ll"), &k.ll, lhw);
            c.resample(hc, lhw);
            c.conv(&n("k.h2l"), &k.h2l, lhw);
            c.add(k.hh.c_out(), yh);
            c.add(k.ll.c_out(), yl);
            c.act(&n("act_h"), &u.act_h, yh);
            if let Some(a) = &u.act_l {
                c.act(&n("act_l"), a, yl);
            }
            SigDims::Mf {
                hf: (k.hh.c_out(), yh),
                lf: Some((k.ll.c_out(), yl)),
            }
        }
        Unit::OctT(u) | Unit::OctTLast(u) => {
            c.act(&n("act_h"), &u.act_h, hhw);
            if let (Some(a), Some((_, lhw))) = (&u.act_l, lf) {
                c.act(&n("act_l"), a, lhw);
            }
            if let Some(g) = &u.hf_only {
                let xh = c.tconv(&n("hh"), g, hhw);
                return if matches!(unit, Unit::OctTLast(_)) {
                    SigDims::Plain(g.c_out(), xh)
                } else {
                    SigDims::Mf {
                        hf: (g.c_out(), xh),
                        lf: None,
                    }
                };
            }
            let (_, lhw) = lf.expect("LF band");
            if let Some((gh, gl)) = &u.last {
                let xh = c.tconv(&n("h"), gh, hhw);
                c.tconv(&n("l"), gl, lhw);
                c.resample(gl.c_out(), xh);
                c.add(gh.c_out(), xh);
                return SigDims::Plain(gh.c_out(), xh);
            }
            let k = u.kernels.as_ref().expect("octave kernels");
            let xh = c.tconv(&n("k.hh"), &k.hh, hhw);
            c.tconv(&n("k.l2h"), &k.l2h, lhw);
            c.resample(k.l2h.c_out(), xh);
            let xl = c.tconv(&n("k.ll"), &k.ll, lhw);
            c.resample(hc, lhw);
            c.tconv(&n("k.h2l"), &k.h2l, lhw);
            c.add(k.hh.c_out(), xh);
            c.add(k.ll.c_out(), xl);
            SigDims::Mf {
                hf: (k.hh.c_out(), xh),
                lf: Some((k.ll.c_out(), xl)),
            }
        }
    }
}

impl<T: Real> Module<T> for Unit<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        match self {
            Unit::GoFirst(u) => u.visit(prefix, f),
            Unit::Go(u) => u.visit(prefix, f),
            Unit::GoT(u) => u.visit(prefix, f),
            Unit::GoTLast(u) => u.visit(prefix, f),
            Unit::OctFirst(u) | Unit::Oct(u) => u.visit(prefix, f),
            Unit::OctT(u) | Unit::OctTLast(u) => u.visit(prefix, f),
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        match self {
            Unit::GoFirst(u) => u.visit_mut(prefix, f),
            Unit::Go(u) => u.visit_mut(prefix, f),
            Unit::GoT(u) => u.visit_mut(prefix, f),
            Unit::GoTLast(u) => u.visit_mut(prefix, f),
            Unit::OctFirst(u) | Unit::Oct(u) => u.visit_mut(prefix, f),
            Unit::OctT(u) | Unit::OctTLast(u) => u.visit_mut(prefix, f),
        }
    }
}

impl<T: Real> Module<T> for Stage<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        if let Some(a) = &self.pre {
            a.visit(&join(prefix, "pre"), f);
        }
        self.unit.visit(prefix, f);
        if let Some(a) = &self.post {
            a.visit(&join(prefix, "post"), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        if let Some(a) = &mut self.pre {
            a.visit_mut(&join(prefix, "pre"), f);
        }
        self.unit.visit_mut(prefix, f);
        if let Some(a) = &mut self.post {
            a.visit_mut(&join(prefix, "post"), f);
        }
    }
}

/// A chain of stages.
#[derive(Clone, Debug)]
pub struct Chain<T: Real> {
    pub stages: Vec<Stage<T>>,
}

impl<T: Real> Chain<T> {
    pub fn forward(&self, tape: &mut Tape<T>, mut x: Signal) -> Result<Signal> {
        for s in &self.stages {
            x = s.forward(tape, x)?;
        }
        Ok(x)
    }

    pub(crate) fn count(&self, c: &mut Counter, prefix: &str, mut dims: SigDims) -> SigDims {
        for (i, s) in self.stages.iter().enumerate() {
            dims = s.count(c, &join(prefix, &i.to_string()), dims);
        }
        dims
    }
}

impl<T: Real> Module<T> for Chain<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (i, s) in self.stages.iter().enumerate() {
            s.visit(&join(prefix, &i.to_string()), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}
