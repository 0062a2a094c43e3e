//! Primitive layers: convolution, transposed convolution, causal masked
//! convolution, GDN/IGDN and leaky ReLU.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tape::{ParamId, Tape, Var};
use crate::tensor::Tensor;

pub const BETA_MIN: f64 = 1e-6;
pub const GAMMA_MIN: f64 = 0.0;
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;

/// A trainable tensor with a stable identity.
#[derive(Clone, Debug)]
pub struct Param<T: Real> {
    id: ParamId,
    pub value: Tensor<T>,
}

impl<T: Real> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        Self {
            id: ParamId::fresh(),
            value,
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> Var {
        tape.param(self.id, &self.value)
    }
}

/// Anything that owns parameters.
pub trait Module<T: Real> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| n += p.value.numel());
        n
    }
}

impl<T: Real> Module<T> for () {
    fn visit(&self, _: &str, _: &mut dyn FnMut(&str, &Param<T>)) {}
    fn visit_mut(&mut self, _: &str, _: &mut dyn FnMut(&str, &mut Param<T>)) {}
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Seeded variance-scaling initializer. Layers draw from it in construction
/// order, so a fixed seed reproduces a whole model bit for bit.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Zero-mean normal with variance `1 / fan_in`.
    pub fn kernel<T: Real>(&mut self, shape: [usize; 4], fan_in: usize) -> Tensor<T> {
        let std = (1.0 / fan_in.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        Tensor::from_fn(shape, |_| T::of(normal.sample(&mut self.rng)))
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d<T: Real> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Real> Conv2d<T> {
    /// "Same"-style padding `k / 2`.
    pub fn new(c_in: usize, c_out: usize, k: usize, stride: usize, init: &mut Init) -> Self {
        Self {
            weight: Param::new(init.kernel([c_out, c_in, k, k], c_in * k * k)),
            bias: Param::new(Tensor::zeros([c_out])),
            stride,
            pad: k / 2,
        }
    }

    pub fn c_in(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn c_out(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn kernel_size(&self) -> usize {
        self.weight.value.shape()[2]
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = self.weight.bind(tape);
        let b = self.bias.bind(tape);
        tape.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

impl<T: Real> Module<T> for Conv2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

#[derive(Clone, Debug)]
pub struct TConv2d<T: Real> {
    /// `[in, out, k, k]`
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub stride: usize,
    pub pad: usize,
    pub output_padding: usize,
}

impl<T: Real> TConv2d<T> {
    /// Padding `k / 2` and output padding `stride - 1`, so the output is exactly
    /// `stride` times the input.
    pub fn new(c_in: usize, c_out: usize, k: usize, stride: usize, init: &mut Init) -> Self {
        Self {
            weight: Param::new(init.kernel([c_in, c_out, k, k], c_in * k * k)),
            bias: Param::new(Tensor::zeros([c_out])),
            stride,
            pad: k / 2,
            output_padding: stride - 1,
        }
    }

    pub fn c_in(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn c_out(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn kernel_size(&self) -> usize {
        self.weight.value.shape()[2]
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = self.weight.bind(tape);
        let b = self.bias.bind(tape);
        tape.tconv2d(x, w, Some(b), self.stride, self.pad, self.output_padding)
    }
}

impl<T: Real> Module<T> for TConv2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Type-A causal mask: for every channel pair, the taps strictly before the
/// kernel centre in raster order are open; the centre and everything after it
/// are closed.
pub fn causal_mask<T: Real>(c_out: usize, c_in: usize, k: usize) -> Tensor<T> {
    let centre = (k * k) / 2;
    Tensor::from_fn([c_out, c_in, k, k], |i| {
        if i % (k * k) < centre {
            T::one()
        } else {
            T::zero()
        }
    })
}

fn validate_mask<T: Real>(mask: &Tensor<T>, weight_shape: &[usize]) -> Result<()> {
    if mask.shape() != weight_shape {
        return Err(Error::InvalidMask(format!(
            "mask shape {:?} does not match kernel {:?}",
            mask.shape(),
            weight_shape
        )));
    }
    let k = weight_shape[2];
    if k.is_multiple_of(2) {
        return Err(Error::InvalidMask("kernel size must be odd".into()));
    }
    let centre = (k * k) / 2;
    for (i, &m) in mask.data().iter().enumerate() {
        let tap = i % (k * k);
        if m != T::zero() && m != T::one() {
            return Err(Error::InvalidMask("mask must be binary".into()));
        }
        if tap >= centre && m != T::zero() {
            return Err(Error::InvalidMask(format!("tap {tap} at or after the centre is open")));
        }
    }
    Ok(())
}

/// Convolution whose output at a raster position only sees strictly earlier
/// positions of its input.
#[derive(Clone, Debug)]
pub struct MaskedConv2d<T: Real> {
    pub conv: Conv2d<T>,
    pub mask: Tensor<T>,
}

impl<T: Real> MaskedConv2d<T> {
    pub fn new(c_in: usize, c_out: usize, k: usize, init: &mut Init) -> Self {
        let mut conv = Conv2d::new(c_in, c_out, k, 1, init);
        let mask = causal_mask::<T>(c_out, c_in, k);
        // Kaiming scale over the open taps only.
        let open = c_in * (k * k / 2);
        let fresh = init.kernel::<T>([c_out, c_in, k, k], open);
        conv.weight.value = fresh.zip_map(&mask, |w, m| w * m).expect("same shape");
        Self { conv, mask }
    }

    pub fn with_mask(conv: Conv2d<T>, mask: Tensor<T>) -> Result<Self> {
        if conv.stride != 1 {
            return Err(Error::InvalidMask("masked convolution must have stride 1".into()));
        }
        validate_mask(&mask, conv.weight.value.shape())?;
        Ok(Self { conv, mask })
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = self.conv.weight.bind(tape);
        let m = tape.constant(self.mask.clone());
        let wm = tape.mul(w, m)?;
        let b = self.conv.bias.bind(tape);
        tape.conv2d(x, wm, Some(b), 1, self.conv.pad)
    }

    /// Number of open spatial taps per channel pair.
    pub fn open_taps(&self) -> usize {
        let k = self.conv.kernel_size();
        self.mask.data()[..k * k].iter().filter(|&&m| m != T::zero()).count()
    }
}

impl<T: Real> Module<T> for MaskedConv2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.conv.visit(prefix, f)
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv.visit_mut(prefix, f)
    }
}

/// Generalized divisive normalization, `y_i = x_i / sqrt(beta_i + sum_j gamma_ij x_j^2)`,
/// or its multiplicative inverse form.
///
/// `beta = beta_raw^2 + BETA_MIN` and `gamma = gamma_raw^2 + GAMMA_MIN`, so the
/// stored values are unconstrained.
#[derive(Clone, Debug)]
pub struct Gdn<T: Real> {
    pub beta_raw: Param<T>,
    pub gamma_raw: Param<T>,
    pub inverse: bool,
}

impl<T: Real> Gdn<T> {
    /// `beta = 1`, `gamma = 0.1 I` plus a small off-diagonal coupling so the
    /// off-diagonal raw values start with a non-zero gradient.
    pub fn new(channels: usize, inverse: bool) -> Self {
        let beta_raw = Tensor::full([channels], T::of((1.0 - BETA_MIN).sqrt()));
        let gamma_raw = Tensor::from_fn([channels, channels], |i| {
            if i / channels == i % channels {
                T::of(0.1f64.sqrt())
            } else {
                T::of(1e-2)
            }
        });
        Self {
            beta_raw: Param::new(beta_raw),
            gamma_raw: Param::new(gamma_raw),
            inverse,
        }
    }

    pub fn from_effective(beta: &[f64], gamma: &[f64], inverse: bool) -> Result<Self> {
        let c = beta.len();
        if gamma.len() != c * c || beta.iter().any(|&b| b < BETA_MIN) || gamma.iter().any(|&g| g < GAMMA_MIN) {
            return Err(Error::Config("GDN parameters out of range".into()));
        }
        let beta_raw: Vec<f64> = beta.iter().map(|b| (b - BETA_MIN).sqrt()).collect();
        let gamma_raw: Vec<f64> = gamma.iter().map(|g| (g - GAMMA_MIN).sqrt()).collect();
        Ok(Self {
            beta_raw: Param::new(Tensor::from_f64([c], &beta_raw)?),
            gamma_raw: Param::new(Tensor::from_f64([c, c], &gamma_raw)?),
            inverse,
        })
    }

    pub fn channels(&self) -> usize {
        self.beta_raw.value.numel()
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let c = self.channels();
        let in_c = tape.value(x).dims4()?[1];
        if in_c != c {
            return Err(Error::ShapeMismatch {
                lhs: tape.shape(x).to_vec(),
                rhs: vec![c],
                context: "gdn channels",
            });
        }
        let br = self.beta_raw.bind(tape);
        let b2 = tape.square(br)?;
        let beta = tape.add_scalar(b2, BETA_MIN)?;
        let gr = self.gamma_raw.bind(tape);
        let g2 = tape.square(gr)?;
        let g2 = tape.add_scalar(g2, GAMMA_MIN)?;
        let gamma = tape.reshape(g2, &[c, c, 1, 1])?;
        let x2 = tape.square(x)?;
        let norm = tape.conv2d(x2, gamma, Some(beta), 1, 0)?;
        let denom = tape.sqrt(norm)?;
        if self.inverse {
            tape.mul(x, denom)
        } else {
            tape.div(x, denom)
        }
    }
}

impl<T: Real> Module<T> for Gdn<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "beta_raw"), &self.beta_raw);
        f(&join(prefix, "gamma_raw"), &self.gamma_raw);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "beta_raw"), &mut self.beta_raw);
        f(&join(prefix, "gamma_raw"), &mut self.gamma_raw);
    }
}

/// Nonlinearity choice for a layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ActKind {
    Identity,
    LeakyRelu(f64),
    Gdn,
    Igdn,
}

impl ActKind {
    pub fn build<T: Real>(self, channels: usize) -> Activation<T> {
        match self {
            ActKind::Identity => Activation::Identity,
            ActKind::LeakyRelu(s) => Activation::LeakyRelu(s),
            ActKind::Gdn => Activation::Gdn(Gdn::new(channels, false)),
            ActKind::Igdn => Activation::Gdn(Gdn::new(channels, true)),
        }
    }
}

#[derive(Clone, Debug)]
pub enum Activation<T: Real> {
    Identity,
    LeakyRelu(f64),
    Gdn(Gdn<T>),
}

impl<T: Real> Activation<T> {
    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        match self {
            Activation::Identity => Ok(x),
            Activation::LeakyRelu(s) => tape.leaky_relu(x, *s),
            Activation::Gdn(g) => g.forward(tape, x),
        }
    }
}

impl<T: Real> Module<T> for Activation<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        if let Activation::Gdn(g) = self {
            g.visit(prefix, f)
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        if let Activation::Gdn(g) = self {
            g.visit_mut(prefix, f)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{assert_grads_match, finite_diff_grad};
    use proptest::prelude::*;
    use rand::Rng;

    fn random(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-2.0..2.0))
    }

    fn eval(f: impl Fn(&mut Tape<f64>, Var) -> Result<Var>, x: &Tensor<f64>) -> Tensor<f64> {
        let mut t = Tape::new();
        let v = t.constant(x.clone());
        let y = f(&mut t, v).unwrap();
        t.value(y).clone()
    }

    #[test]
    fn leaky_relu_cases() {
        let x = Tensor::<f64>::from_f64([1, 1, 1, 3], &[-2.0, 0.0, 3.0]).unwrap();
        let y = eval(|t, v| t.leaky_relu(v, 0.2), &x);
        assert!((y.data()[0] + 0.4).abs() < 1e-15);
        assert_eq!(&y.data()[1..], &[0.0, 3.0]);
        assert_eq!(eval(|t, v| t.leaky_relu(v, 1.0), &x), x);
    }

    #[test]
    fn same_seed_same_parameters_and_zero_bias() {
        let a: Conv2d<f32> = Conv2d::new(4, 8, 5, 2, &mut Init::new(42));
        let b: Conv2d<f32> = Conv2d::new(4, 8, 5, 2, &mut Init::new(42));
        assert_eq!(a.weight.value, b.weight.value);
        assert!(a.bias.value.data().iter().all(|&v| v == 0.0));
        assert_ne!(a.weight.id(), b.weight.id());
    }

    #[test]
    fn kernel_variance_is_one_over_fan_in() {
        // fan_in = 64 * 25 = 1600
        let c: Conv2d<f64> = Conv2d::new(64, 32, 5, 1, &mut Init::new(9));
        let w = c.weight.value.data();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64;
        let expected = 1.0 / 1600.0;
        assert!((var / expected - 1.0).abs() < 0.2, "variance {var} vs {expected}");
    }

    #[test]
    fn five_by_five_mask_opens_twelve_taps() {
        let m: MaskedConv2d<f32> = MaskedConv2d::new(2, 3, 5, &mut Init::new(0));
        assert_eq!(m.open_taps(), 12);
        assert!(MaskedConv2d::with_mask(m.conv.clone(), m.mask.clone()).is_ok());
        let mut bad = m.mask.clone();
        bad.data_mut()[12] = 1.0;
        assert!(matches!(
            MaskedConv2d::with_mask(m.conv.clone(), bad),
            Err(Error::InvalidMask(_))
        ));
    }

    #[test]
    fn masked_conv_zero_input_gives_bias() {
        let mut m: MaskedConv2d<f64> = MaskedConv2d::new(2, 3, 5, &mut Init::new(1));
        m.conv.bias.value = Tensor::from_f64([3], &[0.5, -1.0, 2.0]).unwrap();
        let y = eval(|t, v| m.forward(t, v), &Tensor::zeros([1, 2, 6, 6]));
        for (i, v) in y.data().iter().enumerate() {
            assert_eq!(*v, m.conv.bias.value.data()[i / 36]);
        }
    }

    #[test]
    fn masked_conv_is_causal_under_exhaustive_perturbation() {
        let m: MaskedConv2d<f64> = MaskedConv2d::new(2, 3, 5, &mut Init::new(3));
        let base = random([1, 2, 8, 8], 5);
        let y0 = eval(|t, v| m.forward(t, v), &base);
        for c in 0..2 {
            for j in 0..64 {
                let mut x = base.clone();
                x.data_mut()[c * 64 + j] += 1.0;
                let y = eval(|t, v| m.forward(t, v), &x);
                for co in 0..3 {
                    for i in 0..=j {
                        let idx = co * 64 + i;
                        assert_eq!(y.data()[idx], y0.data()[idx], "pos {i} moved after perturbing {j}");
                    }
                }
            }
        }
    }

    #[test]
    fn masked_positions_have_zero_gradient() {
        let m: MaskedConv2d<f64> = MaskedConv2d::new(2, 2, 5, &mut Init::new(4));
        let mut t = Tape::new();
        let x = t.constant(random([1, 2, 6, 6], 1));
        let y = m.forward(&mut t, x).unwrap();
        let l = t.sum(y).unwrap();
        let g = t.backward(l).unwrap();
        let gw = g.param(m.conv.weight.id()).unwrap();
        for (gv, mv) in gw.data().iter().zip(m.mask.data()) {
            if *mv == 0.0 {
                assert_eq!(*gv, 0.0);
            }
        }
    }

    #[test]
    fn gdn_with_zero_gamma_and_unit_beta_is_identity() {
        let g: Gdn<f64> = Gdn::from_effective(&[1.0; 3], &[0.0; 9], false).unwrap();
        let x = random([1, 3, 4, 4], 2);
        let y = eval(|t, v| g.forward(t, v), &x);
        assert!(crate::gradcheck::relative_error(&x, &y) < 1e-12);
    }

    #[test]
    fn igdn_inverts_gdn_when_gamma_is_zero() {
        let beta = [0.5, 2.0, 1.3];
        let fwd: Gdn<f64> = Gdn::from_effective(&beta, &[0.0; 9], false).unwrap();
        let inv: Gdn<f64> = Gdn::from_effective(&beta, &[0.0; 9], true).unwrap();
        let x = random([2, 3, 4, 4], 3);
        let y = eval(|t, v| fwd.forward(t, v), &x);
        let back = eval(|t, v| inv.forward(t, v), &y);
        assert!(crate::gradcheck::relative_error(&x, &back) < 1e-5);
    }

    proptest! {
        #[test]
        fn gdn_output_is_bounded(vals in proptest::collection::vec(-50.0f64..50.0, 2 * 9), seed in 0u64..100) {
            let mut g: Gdn<f64> = Gdn::new(2, false);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            g.beta_raw.value = Tensor::from_fn([2], |_| rng.random_range(-1.0..1.0));
            g.gamma_raw.value = Tensor::from_fn([2, 2], |_| rng.random_range(-1.0..1.0));
            let x = Tensor::new([1, 2, 3, 3], vals).unwrap();
            let y = eval(|t, v| g.forward(t, v), &x);
            for (xi, yi) in x.data().iter().zip(y.data()) {
                prop_assert!(yi.abs() <= xi.abs() / BETA_MIN.sqrt() + 1e-12);
            }
        }
    }

    #[test]
    fn gdn_gradients_match_finite_differences() {
        for (seed, inverse) in [(0u64, false), (1, false), (2, false), (3, true), (4, true), (5, true)] {
            let mut g: Gdn<f64> = Gdn::new(4, inverse);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            g.beta_raw.value = Tensor::from_fn([4], |_| rng.random_range(0.5..1.5));
            g.gamma_raw.value = Tensor::from_fn([4, 4], |_| rng.random_range(-0.6..0.6));
            let x0 = random([1, 4, 6, 6], seed);
            let loss = |g: &Gdn<f64>, x: &Tensor<f64>| -> Result<(f64, Tape<f64>, Var, Var)> {
                let mut t = Tape::new();
                let xv = t.input(x.clone());
                let y = g.forward(&mut t, xv)?;
                let w = t.constant(Tensor::from_fn(t.shape(y).to_vec(), |i| ((i % 7) as f64 - 3.0) * 0.3));
                let yw = t.mul(y, w)?;
                let s = t.sum(yw)?;
                let v = t.value(s).item();
                Ok((v, t, xv, s))
            };
            let (_, t, xv, s) = loss(&g, &x0).unwrap();
            let grads = t.backward(s).unwrap();
            let fx = finite_diff_grad(|x| Ok(loss(&g, x)?.0), &x0, 1e-4).unwrap();
            assert_grads_match("gdn x", grads.get(xv).unwrap(), &fx, 1e-5);
            let fb = finite_diff_grad(
                |b| {
                    let mut g2 = g.clone();
                    g2.beta_raw.value = b.clone();
                    Ok(loss(&g2, &x0)?.0)
                },
                &g.beta_raw.value,
                1e-4,
            )
            .unwrap();
            assert_grads_match("gdn beta", grads.param(g.beta_raw.id()).unwrap(), &fb, 1e-5);
            let fg = finite_diff_grad(
                |gm| {
                    let mut g2 = g.clone();
                    g2.gamma_raw.value = gm.clone();
                    Ok(loss(&g2, &x0)?.0)
                },
                &g.gamma_raw.value,
                1e-4,
            )
            .unwrap();
            assert_grads_match("gdn gamma", grads.param(g.gamma_raw.id()).unwrap(), &fg, 1e-5);
        }
    }
}
