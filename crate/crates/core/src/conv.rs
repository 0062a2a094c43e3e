//! Convolution and transposed convolution on the tape (im2col + GEMM).
//!
//! Convolution is cross-correlation (no kernel flip). A transposed convolution
//! with weight `[in, out, k, k]` is exactly the data-gradient of the convolution
//! whose weight `[out', in', k, k]` has the same memory layout, so both share
//! the same `im2col`/`col2im` pair.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Per-sample input and weight gradients.
type GradPair<T> = (Option<Vec<T>>, Option<Vec<T>>);

/// Geometry of a convolution from an `h x w` input to an `ho x wo` output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(channels: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Result<Self> {
        let out = |n: usize| -> Option<usize> {
            let padded = n + 2 * pad;
            (padded >= k && stride > 0).then(|| (padded - k) / stride + 1)
        };
        match (out(h), out(w)) {
            (Some(ho), Some(wo)) if ho > 0 && wo > 0 => Ok(Self {
                channels,
                h,
                w,
                k,
                stride,
                pad,
                ho,
                wo,
            }),
            _ => Err(Error::InvalidShape {
                shape: vec![channels, h, w],
                reason: format!("kernel {k} stride {stride} pad {pad} gives no output"),
            }),
        }
    }

    fn rows(&self) -> usize {
        self.channels * self.k * self.k
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output extent of a transposed convolution.
pub fn tconv_out(n: usize, k: usize, stride: usize, pad: usize, output_padding: usize) -> Result<usize> {
    let full = (n.max(1) - 1) * stride + k + output_padding;
    if n == 0 || full <= 2 * pad || output_padding >= stride.max(1) {
        return Err(Error::InvalidShape {
            shape: vec![n],
            reason: format!(
                "transposed conv k {k} stride {stride} pad {pad} output_padding {output_padding} is invalid"
            ),
        });
    }
    Ok(full - 2 * pad)
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let p = g.ho * g.wo;
    let mut cols = vec![T::zero(); g.rows() * p];
    for c in 0..g.channels {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for kh in 0..g.k {
            for kw in 0..g.k {
                let row = &mut cols[((c * g.k + kh) * g.k + kw) * p..][..p];
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + kh) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    let dst = &mut row[oh * g.wo..(oh + 1) * g.wo];
                    for (ow, d) in dst.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kw) as isize - g.pad as isize;
                        if iw >= 0 && iw < g.w as isize {
                            *d = src[iw as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let p = g.ho * g.wo;
    let mut x = vec![T::zero(); g.channels * g.h * g.w];
    for c in 0..g.channels {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for kh in 0..g.k {
            for kw in 0..g.k {
                let row = &cols[((c * g.k + kh) * g.k + kw) * p..][..p];
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + kh) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    let src = &row[oh * g.wo..(oh + 1) * g.wo];
                    for (ow, &s) in src.iter().enumerate() {
                        let iw = (ow * g.stride + kw) as isize - g.pad as isize;
                        if iw >= 0 && iw < g.w as isize {
                            dst[iw as usize] = dst[iw as usize] + s;
                        }
                    }
                }
            }
        }
    }
    x
}

/// `c[m, n] = a[m, k] * b[k, n]` with optional transposes expressed as strides.
fn matmul<T: Real>(m: usize, k: usize, n: usize, a: &[T], a_t: bool, b: &[T], b_t: bool) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    let (ars, acs) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (brs, bcs) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    T::gemm(
        m,
        k,
        n,
        T::one(),
        (a, ars, acs),
        (b, brs, bcs),
        T::zero(),
        (&mut c, n as isize, 1),
    );
    c
}

fn add_bias<T: Real>(out: &mut [T], bias: Option<&[T]>, plane: usize) {
    if let Some(b) = bias {
        for (chunk, &bv) in out.chunks_mut(plane).zip(b) {
            chunk.iter_mut().for_each(|v| *v = *v + bv);
        }
    }
}

fn bias_grad<T: Real>(g: &[T], n: usize, c: usize, plane: usize) -> Vec<T> {
    let mut db = vec![T::zero(); c];
    for b in 0..n {
        for (ci, acc) in db.iter_mut().enumerate() {
            let s: T = g[(b * c + ci) * plane..][..plane].iter().copied().sum();
            *acc = *acc + s;
        }
    }
    db
}

fn sum_in_order<T: Real>(parts: Vec<Vec<T>>) -> Vec<T> {
    let mut it = parts.into_iter();
    let mut acc = it.next().unwrap_or_default();
    for p in it {
        acc.iter_mut().zip(p).for_each(|(a, b)| *a = *a + b);
    }
    acc
}

fn check_weight<T: Real>(w: &Tensor<T>, c_in_axis: usize, c_in: usize, what: &'static str) -> Result<[usize; 4]> {
    let d = w.dims4()?;
    if d[2] != d[3] {
        return Err(Error::InvalidShape {
            shape: d.to_vec(),
            reason: format!("{what} kernel must be square"),
        });
    }
    if d[c_in_axis] != c_in {
        return Err(Error::ShapeMismatch {
            lhs: d.to_vec(),
            rhs: vec![c_in],
            context: what,
        });
    }
    Ok(d)
}

fn check_bias<T: Real>(b: Option<&Tensor<T>>, c: usize) -> Result<()> {
    if let Some(b) = b {
        if b.shape() != [c] {
            return Err(Error::ShapeMismatch {
                lhs: b.shape().to_vec(),
                rhs: vec![c],
                context: "bias",
            });
        }
    }
    Ok(())
}

/// Forward value of a 2-d convolution, outside any tape.
pub fn conv2d_value<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let [n, cin, h, wd] = x.dims4()?;
    let [cout, _, k, _] = check_weight(w, 1, cin, "conv2d")?;
    check_bias(b, cout)?;
    let g = ConvGeom::new(cin, h, wd, k, stride, pad)?;
    let plane = g.ho * g.wo;
    let in_sz = cin * h * wd;
    let wdat = w.data();
    let outs: Vec<Vec<T>> = (0..n)
        .into_par_iter()
        .map(|bi| {
            let xb = &x.data()[bi * in_sz..(bi + 1) * in_sz];
            let mut o = if g.is_pointwise() {
                matmul(cout, g.rows(), plane, wdat, false, xb, false)
            } else {
                let cols = im2col(xb, &g);
                matmul(cout, g.rows(), plane, wdat, false, &cols, false)
            };
            add_bias(&mut o, b.map(|t| t.data()), plane);
            o
        })
        .collect();
    Tensor::new([n, cout, g.ho, g.wo], outs.concat())
}

/// Forward value of a 2-d transposed convolution, outside any tape.
pub fn tconv2d_value<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
    output_padding: usize,
) -> Result<Tensor<T>> {
    let [n, cin, h, wd] = x.dims4()?;
    let [_, cout, k, _] = check_weight(w, 0, cin, "tconv2d")?;
    check_bias(b, cout)?;
    let ho = tconv_out(h, k, stride, pad, output_padding)?;
    let wo = tconv_out(wd, k, stride, pad, output_padding)?;
    // The adjoint convolution maps [cout, ho, wo] -> [cin, h, w].
    let g = ConvGeom::new(cout, ho, wo, k, stride, pad)?;
    debug_assert_eq!((g.ho, g.wo), (h, wd));
    let plane_in = h * wd;
    let plane_out = ho * wo;
    let wdat = w.data();
    let outs: Vec<Vec<T>> = (0..n)
        .into_par_iter()
        .map(|bi| {
            let xb = &x.data()[bi * cin * plane_in..(bi + 1) * cin * plane_in];
            let cols = matmul(g.rows(), cin, plane_in, wdat, true, xb, false);
            let mut o = col2im(&cols, &g);
            add_bias(&mut o, b.map(|t| t.data()), plane_out);
            o
        })
        .collect();
    Tensor::new([n, cout, ho, wo], outs.concat())
}

impl<T: Real> Tape<T> {
    /// 2-d cross-correlation. `w` is `[out, in, k, k]`, `b` is `[out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let value = conv2d_value(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad)?;
        let [n, cin, h, wd] = self.value(x).dims4()?;
        let [cout, _, k, _] = self.value(w).dims4()?;
        let g = ConvGeom::new(cin, h, wd, k, stride, pad)?;
        self.add_macs((n * cout * g.rows() * g.ho * g.wo) as u64);
        let mut parents = vec![x, w];
        parents.extend(b);
        self.record(
            "conv2d",
            &parents,
            value,
            Box::new(move |ctx| {
                let (xv, wv) = (ctx.inputs[0], ctx.inputs[1]);
                let gout = ctx.grad.data();
                let plane = g.ho * g.wo;
                let in_sz = cin * h * wd;
                let krows = g.rows();
                let per: Vec<GradPair<T>> = (0..n)
                    .into_par_iter()
                    .map(|bi| {
                        let gb = &gout[bi * cout * plane..(bi + 1) * cout * plane];
                        let xb = &xv.data()[bi * in_sz..(bi + 1) * in_sz];
                        let dx = ctx.needs[0].then(|| {
                            let dcols = matmul(krows, cout, plane, wv.data(), true, gb, false);
                            if g.is_pointwise() {
                                dcols
                            } else {
                                col2im(&dcols, &g)
                            }
                        });
                        let dw = ctx.needs[1].then(|| {
                            if g.is_pointwise() {
                                matmul(cout, plane, krows, gb, false, xb, true)
                            } else {
                                let cols = im2col(xb, &g);
                                matmul(cout, plane, krows, gb, false, &cols, true)
                            }
                        });
                        (dx, dw)
                    })
                    .collect();
                let (dxs, dws): (Vec<_>, Vec<_>) = per.into_iter().unzip();
                let dx = if ctx.needs[0] {
                    Some(Tensor::new(
                        xv.shape().to_vec(),
                        dxs.into_iter().flatten().flatten().collect(),
                    )?)
                } else {
                    None
                };
                let dw = if ctx.needs[1] {
                    Some(Tensor::new(
                        wv.shape().to_vec(),
                        sum_in_order(dws.into_iter().flatten().collect()),
                    )?)
                } else {
                    None
                };
                let mut res = vec![dx, dw];
                if ctx.inputs.len() == 3 {
                    res.push(if ctx.needs[2] {
                        Some(Tensor::new([cout], bias_grad(gout, n, cout, plane))?)
                    } else {
                        None
                    });
                }
                Ok(res)
            }),
        )
    }

    /// 2-d transposed convolution. `w` is `[in, out, k, k]`, `b` is `[out]`.
    pub fn tconv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        output_padding: usize,
    ) -> Result<Var> {
        let value = tconv2d_value(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
            output_padding,
        )?;
        let [n, cin, h, wd] = self.value(x).dims4()?;
        let [_, cout, k, _] = self.value(w).dims4()?;
        let [_, _, ho, wo] = value.dims4()?;
        let g = ConvGeom::new(cout, ho, wo, k, stride, pad)?;
        self.add_macs((n * cin * cout * k * k * h * wd) as u64);
        let mut parents = vec![x, w];
        parents.extend(b);
        self.record(
            "tconv2d",
            &parents,
            value,
            Box::new(move |ctx| {
                let (xv, wv) = (ctx.inputs[0], ctx.inputs[1]);
                let gout = ctx.grad.data();
                let plane_in = h * wd;
                let plane_out = ho * wo;
                let krows = g.rows();
                let per: Vec<GradPair<T>> = (0..n)
                    .into_par_iter()
                    .map(|bi| {
                        let gb = &gout[bi * cout * plane_out..(bi + 1) * cout * plane_out];
                        let xb = &xv.data()[bi * cin * plane_in..(bi + 1) * cin * plane_in];
                        let cols = im2col(gb, &g);
                        let dx = ctx.needs[0].then(|| matmul(cin, krows, plane_in, wv.data(), false, &cols, false));
                        let dw = ctx.needs[1].then(|| matmul(cin, plane_in, krows, xb, false, &cols, true));
                        (dx, dw)
                    })
                    .collect();
                let (dxs, dws): (Vec<_>, Vec<_>) = per.into_iter().unzip();
                let dx = if ctx.needs[0] {
                    Some(Tensor::new(
                        xv.shape().to_vec(),
                        dxs.into_iter().flatten().flatten().collect(),
                    )?)
                } else {
                    None
                };
                let dw = if ctx.needs[1] {
                    Some(Tensor::new(
                        wv.shape().to_vec(),
                        sum_in_order(dws.into_iter().flatten().collect()),
                    )?)
                } else {
                    None
                };
                let mut res = vec![dx, dw];
                if ctx.inputs.len() == 3 {
                    res.push(if ctx.needs[2] {
                        Some(Tensor::new([cout], bias_grad(gout, n, cout, plane_out))?)
                    } else {
                        None
                    });
                }
                Ok(res)
            }),
        )
    }
}
