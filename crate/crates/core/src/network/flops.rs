//! Analytic operation counts.
//!
//! Every convolution-type layer contributes its multiply-accumulates (MACs);
//! a GDN/IGDN layer over `c` channels contributes `c^2` MACs per pixel. The
//! reported FLOPs are `2 * MACs`. Element-wise additions and fixed
//! resampling are tallied separately and not included in the total.

use std::collections::BTreeMap;

use crate::conv::tconv_out;
use crate::layers::{Activation, Conv2d, MaskedConv2d, TConv2d};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Category {
    Conv,
    TConv,
    MaskedConv,
    Pointwise,
    Gdn,
}

impl Category {
    pub fn name(self) -> &'static str {
        match self {
            Category::Conv => "conv",
            Category::TConv => "tconv",
            Category::MaskedConv => "masked_conv",
            Category::Pointwise => "pointwise",
            Category::Gdn => "gdn",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlopEntry {
    pub layer: String,
    pub category: Category,
    pub macs: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FlopReport {
    pub entries: Vec<FlopEntry>,
    /// Element-wise additions (branch sums).
    pub add_ops: u64,
    /// Output elements of average pooling and nearest upsampling.
    pub resample_ops: u64,
}

impl FlopReport {
    pub fn macs(&self) -> u64 {
        self.entries.iter().map(|e| e.macs).sum()
    }

    pub fn total_flops(&self) -> u64 {
        2 * self.macs()
    }

    pub fn gflops(&self) -> f64 {
        self.total_flops() as f64 / 1e9
    }

    /// FLOPs keyed by top-level module (the first segment of the layer name).
    pub fn per_module(&self) -> BTreeMap<String, u64> {
        let mut out = BTreeMap::new();
        for e in &self.entries {
            let module = e.layer.split('.').next().unwrap_or("").to_string();
            *out.entry(module).or_insert(0) += 2 * e.macs;
        }
        out
    }

    pub fn per_category(&self) -> BTreeMap<Category, u64> {
        let mut out = BTreeMap::new();
        for e in &self.entries {
            *out.entry(e.category).or_insert(0) += 2 * e.macs;
        }
        out
    }

    pub(crate) fn push(&mut self, layer: String, category: Category, macs: u64) {
        self.entries.push(FlopEntry { layer, category, macs });
    }
}

/// Spatial extent `(h, w)`.
pub type Hw = (usize, usize);

pub(crate) fn conv_hw(hw: Hw, k: usize, stride: usize, pad: usize) -> Hw {
    let o = |n: usize| (n + 2 * pad).saturating_sub(k) / stride + 1;
    (o(hw.0), o(hw.1))
}

/// FLOPs (2 x multiply-accumulates) of one dense convolution producing an
/// `out_hw` map.
pub fn conv_flops(c_in: usize, c_out: usize, k: usize, out_hw: Hw) -> u64 {
    2 * (c_in * c_out * k * k * out_hw.0 * out_hw.1) as u64
}

pub(crate) struct Counter<'a> {
    pub report: &'a mut FlopReport,
    pub batch: u64,
}

impl Counter<'_> {
    pub fn conv<T: Real>(&mut self, name: &str, c: &Conv2d<T>, hw: Hw) -> Hw {
        let out = conv_hw(hw, c.kernel_size(), c.stride, c.pad);
        let k = c.kernel_size();
        let macs = self.batch * conv_flops(c.c_in(), c.c_out(), k, out) / 2;
        let cat = if k == 1 { Category::Pointwise } else { Category::Conv };
        self.report.push(name.to_string(), cat, macs);
        out
    }

    pub fn masked<T: Real>(&mut self, name: &str, m: &MaskedConv2d<T>, hw: Hw) -> Hw {
        let c = &m.conv;
        let k = c.kernel_size() as u64;
        let macs = self.batch * (c.c_out() * c.c_in()) as u64 * k * k * (hw.0 * hw.1) as u64;
        self.report.push(name.to_string(), Category::MaskedConv, macs);
        hw
    }

    pub fn tconv<T: Real>(&mut self, name: &str, t: &TConv2d<T>, hw: Hw) -> Hw {
        let k = t.kernel_size();
        let out = (
            tconv_out(hw.0, k, t.stride, t.pad, t.output_padding).unwrap_or(0),
            tconv_out(hw.1, k, t.stride, t.pad, t.output_padding).unwrap_or(0),
        );
        let macs = self.batch * (t.c_out() * t.c_in()) as u64 * (k * k) as u64 * (hw.0 * hw.1) as u64;
        self.report.push(name.to_string(), Category::TConv, macs);
        out
    }

    pub fn act<T: Real>(&mut self, name: &str, a: &Activation<T>, hw: Hw) {
        if let Activation::Gdn(g) = a {
            let c = g.channels() as u64;
            self.report.push(
                name.to_string(),
                Category::Gdn,
                self.batch * c * c * (hw.0 * hw.1) as u64,
            );
        }
    }

    pub fn add(&mut self, c: usize, hw: Hw) {
        self.report.add_ops += self.batch * (c * hw.0 * hw.1) as u64;
    }

    pub fn resample(&mut self, c: usize, hw: Hw) {
        self.report.resample_ops += self.batch * (c * hw.0 * hw.1) as u64;
    }
}
