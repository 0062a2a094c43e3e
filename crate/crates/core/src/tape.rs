//! Reverse-mode automatic differentiation.
//!
//! Every differentiable operation appends a node to a [`Tape`]; nodes refer to
//! their inputs by index, so the node list is always in topological order.
//! [`Tape::backward`] walks it once in reverse.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Process-unique identity of a trainable parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

impl ParamId {
    pub fn fresh() -> Self {
        static NEXT: AtomicU64 = AtomicU64::new(0);
        ParamId(NEXT.fetch_add(1, Ordering::Relaxed))
    }
}

/// What a backward closure sees.
pub struct BackwardCtx<'a, T: Real> {
    pub grad: &'a Tensor<T>,
    pub inputs: Vec<&'a Tensor<T>>,
    pub output: &'a Tensor<T>,
    /// Which inputs need a gradient; closures may return `None` for the rest.
    pub needs: Vec<bool>,
}

pub type BackwardFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> + Send + Sync>;

struct Node<T: Real> {
    op: &'static str,
    value: Tensor<T>,
    parents: Vec<Var>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    macs: u64,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<ParamId, Var>,
    visited: usize,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a bound parameter; `None` if it never reached the loss.
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id).and_then(|&v| self.get(v))
    }

    /// Number of recorded operations whose backward rule ran.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

#[derive(Clone, Copy)]
enum Bcast {
    Same,
    Scalar,
    /// `b` is a per-channel vector against an `[n, c, h, w]` tensor.
    Channel {
        c: usize,
        hw: usize,
    },
}

fn broadcast_kind<T: Real>(a: &Tensor<T>, b: &Tensor<T>, context: &'static str) -> Result<Bcast> {
    if a.shape() == b.shape() {
        return Ok(Bcast::Same);
    }
    if b.numel() == 1 {
        return Ok(Bcast::Scalar);
    }
    if let Ok([_, c, h, w]) = a.dims4() {
        let bs = b.shape();
        if bs == [c] || bs == [1, c, 1, 1] {
            return Ok(Bcast::Channel { c, hw: h * w });
        }
    }
    Err(Error::ShapeMismatch {
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
        context,
    })
}

#[inline]
fn bidx(kind: Bcast, i: usize) -> usize {
    match kind {
        Bcast::Same => i,
        Bcast::Scalar => 0,
        Bcast::Channel { c, hw } => (i / hw) % c,
    }
}

/// Sum a full-size gradient down to the shape of a broadcast operand.
fn reduce_to<T: Real>(full: Vec<T>, kind: Bcast, target: &Tensor<T>) -> Result<Tensor<T>> {
    match kind {
        Bcast::Same => Tensor::new(target.shape().to_vec(), full),
        Bcast::Scalar => Tensor::new(target.shape().to_vec(), vec![full.iter().copied().sum()]),
        Bcast::Channel { c, hw } => {
            let mut out = vec![T::zero(); c];
            for (i, chunk) in full.chunks(hw).enumerate() {
                let acc = &mut out[i % c];
                *acc = *acc + chunk.iter().copied().sum();
            }
            Tensor::new(target.shape().to_vec(), out)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            macs: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op
    }

    /// Multiply-accumulates performed by convolution-type operations so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub(crate) fn add_macs(&mut self, n: u64) {
        self.macs += n;
    }

    /// A constant input: never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf("constant", value, false)
    }

    /// A leaf that receives a gradient but is not a named parameter.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf("input", value, true)
    }

    /// Bind a parameter onto the tape. Binding the same id twice returns the
    /// same variable so gradients accumulate in one place.
    pub fn param(&mut self, id: ParamId, value: &Tensor<T>) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push_leaf("param", value.clone(), true);
        self.params.insert(id, v);
        v
    }

    fn push_leaf(&mut self, op: &'static str, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Record an operation whose value has already been computed. The backward
    /// closure is only kept if some input requires a gradient.
    pub fn record(
        &mut self,
        op: &'static str,
        parents: &[Var],
        value: Tensor<T>,
        backward: BackwardFn<T>,
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            parents: parents.to_vec(),
            backward: if requires_grad { Some(backward) } else { None },
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), T::one()));
        let mut visited = 0;
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(bw) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            visited += 1;
            let inputs: Vec<&Tensor<T>> = node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let needs: Vec<bool> = node.parents.iter().map(|p| self.nodes[p.0].requires_grad).collect();
            let ctx = BackwardCtx {
                grad: &g,
                inputs,
                output: &node.value,
                needs,
            };
            let pgrads = bw(&ctx)?;
            for (p, pg) in node.parents.iter().zip(pgrads) {
                let Some(pg) = pg else { continue };
                if !self.nodes[p.0].requires_grad {
                    continue;
                }
                if !pg.is_finite() {
                    return Err(Error::NonFinite { op: node.op });
                }
                match &mut grads[p.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(pg.data()) {
                            *a = *a + *b;
                        }
                    }
                    slot @ None => *slot = Some(pg),
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
            visited,
        })
    }

    // ---- elementwise binary -------------------------------------------------

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let kind = broadcast_kind(av, bv, "binary op")?;
        let (ad, bd) = (av.data(), bv.data());
        let f = |x: T, y: T| match op {
            BinaryOp::Add => x + y,
            BinaryOp::Sub => x - y,
            BinaryOp::Mul => x * y,
            BinaryOp::Div => x / y,
        };
        let out: Vec<T> = ad.iter().enumerate().map(|(i, &x)| f(x, bd[bidx(kind, i)])).collect();
        let value = Tensor::new(av.shape().to_vec(), out)?;
        let name = match op {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
        };
        self.record(
            name,
            &[a, b],
            value,
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let (x, y) = (ctx.inputs[0], ctx.inputs[1]);
                let (xd, yd) = (x.data(), y.data());
                let ga = if ctx.needs[0] {
                    let v: Vec<T> = match op {
                        BinaryOp::Add | BinaryOp::Sub => g.to_vec(),
                        BinaryOp::Mul => g.iter().enumerate().map(|(i, &gi)| gi * yd[bidx(kind, i)]).collect(),
                        BinaryOp::Div => g.iter().enumerate().map(|(i, &gi)| gi / yd[bidx(kind, i)]).collect(),
                    };
                    Some(Tensor::new(x.shape().to_vec(), v)?)
                } else {
                    None
                };
                let gb = if ctx.needs[1] {
                    let full: Vec<T> = match op {
                        BinaryOp::Add => g.to_vec(),
                        BinaryOp::Sub => g.iter().map(|&gi| -gi).collect(),
                        BinaryOp::Mul => g.iter().zip(xd).map(|(&gi, &xi)| gi * xi).collect(),
                        BinaryOp::Div => g
                            .iter()
                            .zip(xd)
                            .enumerate()
                            .map(|(i, (&gi, &xi))| {
                                let yi = yd[bidx(kind, i)];
                                -gi * xi / (yi * yi)
                            })
                            .collect(),
                    };
                    Some(reduce_to(full, kind, y)?)
                } else {
                    None
                };
                Ok(vec![ga, gb])
            }),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    // ---- elementwise unary --------------------------------------------------

    /// Generic pointwise map with derivative `df(x, y)` where `y = f(x)`.
    pub fn unary(
        &mut self,
        op: &'static str,
        x: Var,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + Send + Sync + 'static,
    ) -> Result<Var> {
        let value = self.value(x).map(f);
        self.record(
            op,
            &[x],
            value,
            Box::new(move |ctx| {
                let xd = ctx.inputs[0].data();
                let yd = ctx.output.data();
                let g: Vec<T> = ctx
                    .grad
                    .data()
                    .iter()
                    .zip(xd.iter().zip(yd))
                    .map(|(&g, (&x, &y))| g * df(x, y))
                    .collect();
                Ok(vec![Some(Tensor::new(ctx.inputs[0].shape().to_vec(), g)?)])
            }),
        )
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let s = T::of(s);
        self.unary("scale", x, move |v| v * s, move |_, _| s)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        let s = T::of(s);
        self.unary("add_scalar", x, move |v| v + s, |_, _| T::one())
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary("square", x, |v| v * v, |x, _| x + x)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary("sqrt", x, |v| v.sqrt(), |_, y| T::of(0.5) / y)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, |v| v.exp(), |_, y| y)
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        self.unary("ln", x, |v| v.ln(), |x, _| T::one() / x)
    }

    /// `x^p` for positive `x`.
    pub fn powf(&mut self, x: Var, p: f64) -> Result<Var> {
        let pt = T::of(p);
        self.unary(
            "powf",
            x,
            move |v| v.powf(pt),
            move |x, y| if x == T::zero() { T::zero() } else { pt * y / x },
        )
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let s = T::of(slope);
        self.unary(
            "leaky_relu",
            x,
            move |v| if v >= s * v { v } else { s * v },
            move |x, _| if x >= T::zero() { T::one() } else { s },
        )
    }

    /// `max(x, floor)`; values held at the floor receive no gradient.
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Result<Var> {
        let fl = T::of(floor);
        self.unary(
            "clamp_min",
            x,
            move |v| if v < fl { fl } else { v },
            move |x, _| if x < fl { T::zero() } else { T::one() },
        )
    }

    /// Round half away from zero. The result is treated as a constant.
    pub fn round(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.round());
        self.constant(value)
    }

    /// Value copy without gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    // ---- reductions ---------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.record(
            "sum",
            &[x],
            value,
            Box::new(|ctx| {
                let g = ctx.grad.item();
                Ok(vec![Some(Tensor::full(ctx.inputs[0].shape().to_vec(), g))])
            }),
        )
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Spatial mean of `[n, c, h, w]`, giving `[n, c, 1, 1]`.
    pub fn mean_hw(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        let hw = h * w;
        let inv = T::of(1.0 / hw as f64);
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|ch| ch.iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::new([n, c, 1, 1], out)?;
        self.record(
            "mean_hw",
            &[x],
            value,
            Box::new(move |ctx| {
                let mut g = Vec::with_capacity(n * c * hw);
                for &gi in ctx.grad.data() {
                    g.extend(std::iter::repeat_n(gi * inv, hw));
                }
                Ok(vec![Some(Tensor::new([n, c, h, w], g)?)])
            }),
        )
    }

    // ---- structural ---------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape.to_vec())?;
        self.record(
            "reshape",
            &[x],
            value,
            Box::new(|ctx| Ok(vec![Some(ctx.grad.reshape(ctx.inputs[0].shape().to_vec())?)])),
        )
    }

    /// Concatenate 4-d tensors along the channel axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.value(xs[0]).dims4()?;
        let (n, h, w) = (first[0], first[2], first[3]);
        let mut chans = Vec::with_capacity(xs.len());
        for &x in xs {
            let d = self.value(x).dims4()?;
            if d[0] != n || d[2] != h || d[3] != w {
                return Err(Error::ShapeMismatch {
                    lhs: first.to_vec(),
                    rhs: d.to_vec(),
                    context: "concat_channels",
                });
            }
            chans.push(d[1]);
        }
        let ctot: usize = chans.iter().sum();
        let hw = h * w;
        let mut out = Vec::with_capacity(n * ctot * hw);
        for b in 0..n {
            for (&x, &c) in xs.iter().zip(&chans) {
                out.extend_from_slice(&self.value(x).data()[b * c * hw..(b + 1) * c * hw]);
            }
        }
        let value = Tensor::new([n, ctot, h, w], out)?;
        let chans_bw = chans.clone();
        self.record(
            "concat_channels",
            xs,
            value,
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let mut res = Vec::with_capacity(chans_bw.len());
                let mut offset = 0;
                for (i, &c) in chans_bw.iter().enumerate() {
                    if !ctx.needs[i] {
                        res.push(None);
                        offset += c;
                        continue;
                    }
                    let mut gi = Vec::with_capacity(n * c * hw);
                    for b in 0..n {
                        let base = (b * ctot + offset) * hw;
                        gi.extend_from_slice(&g[base..base + c * hw]);
                    }
                    res.push(Some(Tensor::new([n, c, h, w], gi)?));
                    offset += c;
                }
                Ok(res)
            }),
        )
    }

    /// Channels `[start, start + len)` of a 4-d tensor.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        if start + len > c || len == 0 {
            return Err(Error::InvalidShape {
                shape: vec![n, c, h, w],
                reason: format!("channel slice {start}..{} out of range", start + len),
            });
        }
        let hw = h * w;
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(n * len * hw);
        for b in 0..n {
            let base = (b * c + start) * hw;
            out.extend_from_slice(&xd[base..base + len * hw]);
        }
        let value = Tensor::new([n, len, h, w], out)?;
        self.record(
            "slice_channels",
            &[x],
            value,
            Box::new(move |ctx| {
                let mut g = vec![T::zero(); n * c * hw];
                for (b, chunk) in ctx.grad.data().chunks(len * hw).enumerate() {
                    let base = (b * c + start) * hw;
                    g[base..base + len * hw].copy_from_slice(chunk);
                }
                Ok(vec![Some(Tensor::new([n, c, h, w], g)?)])
            }),
        )
    }

    /// Top-left `ho x wo` window of every plane.
    pub fn crop_hw(&mut self, x: Var, ho: usize, wo: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        if ho > h || wo > w || ho == 0 || wo == 0 {
            return Err(Error::InvalidShape {
                shape: vec![n, c, h, w],
                reason: format!("cannot crop to {ho}x{wo}"),
            });
        }
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        for p in 0..n * c {
            for i in 0..ho {
                let base = p * h * w + i * w;
                out.extend_from_slice(&xd[base..base + wo]);
            }
        }
        let value = Tensor::new([n, c, ho, wo], out)?;
        self.record(
            "crop_hw",
            &[x],
            value,
            Box::new(move |ctx| {
                let mut g = vec![T::zero(); n * c * h * w];
                for (r, row) in ctx.grad.data().chunks(wo).enumerate() {
                    let (p, i) = (r / ho, r % ho);
                    let base = p * h * w + i * w;
                    g[base..base + wo].copy_from_slice(row);
                }
                Ok(vec![Some(Tensor::new([n, c, h, w], g)?)])
            }),
        )
    }

    /// 2x2 average pooling with stride 2 (even spatial dims required).
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::InvalidShape {
                shape: vec![n, c, h, w],
                reason: "average pooling needs even spatial dims".into(),
            });
        }
        let (ho, wo) = (h / 2, w / 2);
        let xd = self.value(x).data();
        let quarter = T::of(0.25);
        let mut out = vec![T::zero(); n * c * ho * wo];
        for p in 0..n * c {
            let src = &xd[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
            for i in 0..ho {
                for j in 0..wo {
                    let s = src[2 * i * w + 2 * j]
                        + src[2 * i * w + 2 * j + 1]
                        + src[(2 * i + 1) * w + 2 * j]
                        + src[(2 * i + 1) * w + 2 * j + 1];
                    dst[i * wo + j] = s * quarter;
                }
            }
        }
        let value = Tensor::new([n, c, ho, wo], out)?;
        self.record(
            "avg_pool2",
            &[x],
            value,
            Box::new(move |ctx| {
                let gd = ctx.grad.data();
                let mut g = vec![T::zero(); n * c * h * w];
                for p in 0..n * c {
                    for i in 0..h {
                        for j in 0..w {
                            g[p * h * w + i * w + j] = gd[p * ho * wo + (i / 2) * wo + j / 2] * quarter;
                        }
                    }
                }
                Ok(vec![Some(Tensor::new([n, c, h, w], g)?)])
            }),
        )
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample_nearest2(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        let (ho, wo) = (2 * h, 2 * w);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); n * c * ho * wo];
        for p in 0..n * c {
            for i in 0..ho {
                for j in 0..wo {
                    out[p * ho * wo + i * wo + j] = xd[p * h * w + (i / 2) * w + j / 2];
                }
            }
        }
        let value = Tensor::new([n, c, ho, wo], out)?;
        self.record(
            "upsample_nearest2",
            &[x],
            value,
            Box::new(move |ctx| {
                let gd = ctx.grad.data();
                let mut g = vec![T::zero(); n * c * h * w];
                for p in 0..n * c {
                    for i in 0..ho {
                        for j in 0..wo {
                            let t = &mut g[p * h * w + (i / 2) * w + j / 2];
                            *t = *t + gd[p * ho * wo + i * wo + j];
                        }
                    }
                }
                Ok(vec![Some(Tensor::new([n, c, h, w], g)?)])
            }),
        )
    }
}
