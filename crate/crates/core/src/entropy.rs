//! Quantization, likelihood models and rate estimation.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{join, Module, Param};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const SIGMA_MIN: f64 = 0.11;
pub const LIKELIHOOD_FLOOR: f64 = 1e-9;
/// Half-width of the factorized prior's support.
pub const PRIOR_HALF_WIDTH: usize = 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Quantizer {
    /// Additive uniform noise in `[-0.5, 0.5)`.
    TrainNoise,
    /// Nearest integer, ties away from zero.
    TestRound,
}

/// Round half away from zero.
pub fn round_half_away(x: f64) -> f64 {
    x.round()
}

impl Quantizer {
    pub fn apply_tensor<T: Real>(self, y: &Tensor<T>, rng: &mut impl Rng) -> Tensor<T> {
        match self {
            Quantizer::TrainNoise => {
                let d = y.data();
                Tensor::new(
                    y.shape().to_vec(),
                    d.iter().map(|&v| v + T::of(rng.random::<f64>() - 0.5)).collect(),
                )
                .expect("same shape")
            }
            Quantizer::TestRound => y.map(|v| v.round()),
        }
    }

    /// Training mode passes gradients straight through the additive noise;
    /// test mode produces a constant.
    pub fn apply<T: Real>(self, tape: &mut Tape<T>, y: Var, rng: &mut impl Rng) -> Result<Var> {
        match self {
            Quantizer::TrainNoise => {
                let noise = Tensor::from_fn(tape.shape(y).to_vec(), |_| T::of(rng.random::<f64>() - 0.5));
                let n = tape.constant(noise);
                tape.add(y, n)
            }
            Quantizer::TestRound => Ok(tape.round(y)),
        }
    }
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// `Phi(hi) - Phi(lo)` for `lo < hi`, evaluated on whichever tail keeps the
/// difference well conditioned.
pub fn normal_mass(lo: f64, hi: f64) -> f64 {
    if lo > 0.0 {
        normal_cdf(-lo) - normal_cdf(-hi)
    } else {
        normal_cdf(hi) - normal_cdf(lo)
    }
}

/// Probability of the unit bin around `y` under `N(mu, sigma^2)`, before the
/// floor is applied.
pub fn gaussian_bin_mass(y: f64, mu: f64, sigma: f64) -> f64 {
    let d = y - mu;
    normal_mass((d - 0.5) / sigma, (d + 0.5) / sigma)
}

/// `sigma = SIGMA_MIN + exp(raw)`.
pub fn sigma_from_raw<T: Real>(tape: &mut Tape<T>, raw: Var) -> Result<Var> {
    let e = tape.exp(raw)?;
    tape.add_scalar(e, SIGMA_MIN)
}

pub fn sigma_from_raw_value(raw: f64) -> f64 {
    SIGMA_MIN + raw.exp()
}

/// Lower bound that still lets gradients through when they would raise the
/// value back above the bound.
fn floor_passes(mass: f64, upstream: f64) -> bool {
    mass >= LIKELIHOOD_FLOOR || upstream < 0.0
}

/// Likelihood of `y` under a Gaussian convolved with a unit uniform,
/// `Phi((y - mu + 1/2) / sigma) - Phi((y - mu - 1/2) / sigma)`, floored at
/// [`LIKELIHOOD_FLOOR`]. Differentiable in all three inputs.
pub fn gaussian_likelihood<T: Real>(tape: &mut Tape<T>, y: Var, mu: Var, sigma: Var) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    for v in [mu, sigma] {
        if tape.shape(v) != shape.as_slice() {
            return Err(Error::ShapeMismatch {
                lhs: shape,
                rhs: tape.shape(v).to_vec(),
                context: "gaussian_likelihood",
            });
        }
    }
    if tape.value(sigma).data().iter().any(|&s| s <= T::zero()) {
        return Err(Error::Probability("sigma must be positive".into()));
    }
    let (yd, md, sd) = (tape.value(y).data(), tape.value(mu).data(), tape.value(sigma).data());
    let p: Vec<T> = (0..yd.len())
        .map(|i| T::of(gaussian_bin_mass(yd[i].f64(), md[i].f64(), sd[i].f64()).max(LIKELIHOOD_FLOOR)))
        .collect();
    let value = Tensor::new(shape.clone(), p)?;
    tape.record(
        "gaussian_likelihood",
        &[y, mu, sigma],
        value,
        Box::new(move |ctx| {
            let (yd, md, sd) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.inputs[2].data());
            let g = ctx.grad.data();
            let n = yd.len();
            let (mut gy, mut gm, mut gs) = (vec![T::zero(); n], vec![T::zero(); n], vec![T::zero(); n]);
            for i in 0..n {
                let (yv, mv, sv) = (yd[i].f64(), md[i].f64(), sd[i].f64());
                let d = yv - mv;
                let (u, l) = ((d + 0.5) / sv, (d - 0.5) / sv);
                let mass = normal_mass(l, u);
                let gi = g[i].f64();
                if !floor_passes(mass, gi) {
                    continue;
                }
                let (pu, pl) = (normal_pdf(u), normal_pdf(l));
                let dy = (pu - pl) / sv;
                let ds = -(pu * u - pl * l) / sv;
                gy[i] = T::of(gi * dy);
                gm[i] = T::of(-gi * dy);
                gs[i] = T::of(gi * ds);
            }
            Ok(vec![
                Some(Tensor::new(shape.clone(), gy)?),
                Some(Tensor::new(shape.clone(), gm)?),
                Some(Tensor::new(shape.clone(), gs)?),
            ])
        }),
    )
}

/// Total information content `sum(-log2 p)` in bits over several likelihood
/// tensors.
pub fn rate_bits<T: Real>(tape: &mut Tape<T>, likelihoods: &[Var]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &p in likelihoods {
        if tape
            .value(p)
            .data()
            .iter()
            .any(|&v| v.partial_cmp(&T::zero()) != Some(std::cmp::Ordering::Greater))
        {
            return Err(Error::Probability("likelihood must be positive".into()));
        }
        let l = tape.ln(p)?;
        let s = tape.sum(l)?;
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    let total = match total {
        Some(t) => t,
        None => tape.constant(Tensor::scalar(T::zero())),
    };
    tape.scale(total, -1.0 / std::f64::consts::LN_2)
}

/// Bits of a likelihood tensor computed outside any tape.
pub fn bits_of<T: Real>(p: &Tensor<T>) -> f64 {
    p.data().iter().map(|v| -v.f64().log2()).sum()
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-channel monotone piecewise-linear CDF on `[-L, L]` with knots at every
/// integer. The `2L` increments between knots are `softplus(raw)` normalized
/// to sum to one.
#[derive(Clone, Debug)]
pub struct FactorizedPrior<T: Real> {
    /// `[channels, 2L]`
    pub raw: Param<T>,
}

/// Knot increments of one channel, derived from its raw parameters.
#[derive(Clone, Debug)]
pub struct Cdf {
    pub half_width: usize,
    /// Normalized increments `d_j`, `j = 0..2L`.
    pub inc: Vec<f64>,
    /// `cum[j] = CDF(knot j) = sum(inc[..j])`.
    pub cum: Vec<f64>,
}

impl Cdf {
    fn from_raw(raw: &[f64]) -> (Self, Vec<f64>, f64) {
        let s: Vec<f64> = raw.iter().map(|&r| softplus(r)).collect();
        let total: f64 = s.iter().sum();
        let inc: Vec<f64> = s.iter().map(|v| v / total).collect();
        let mut cum = Vec::with_capacity(inc.len() + 1);
        let mut acc = 0.0;
        cum.push(0.0);
        for d in &inc {
            acc += d;
            cum.push(acc);
        }
        *cum.last_mut().expect("non-empty") = 1.0;
        (
            Self {
                half_width: raw.len() / 2,
                inc,
                cum,
            },
            s,
            total,
        )
    }

    /// Segment index and offset within it, or `None` outside the support.
    fn locate(&self, x: f64) -> Option<(usize, f64)> {
        let l = self.half_width as f64;
        if x <= -l || x >= l {
            return None;
        }
        let pos = x + l;
        let j = (pos.floor() as usize).min(self.inc.len() - 1);
        Some((j, pos - j as f64))
    }

    pub fn cdf(&self, x: f64) -> f64 {
        let l = self.half_width as f64;
        if x <= -l {
            return 0.0;
        }
        if x >= l {
            return 1.0;
        }
        let (j, t) = self.locate(x).expect("inside support");
        self.cum[j] + t * self.inc[j]
    }

    fn density(&self, x: f64) -> f64 {
        self.locate(x).map_or(0.0, |(j, _)| self.inc[j])
    }

    /// Unfloored probability of the unit bin around `x`.
    pub fn mass(&self, x: f64) -> f64 {
        (self.cdf(x + 0.5) - self.cdf(x - 0.5)).max(0.0)
    }

    /// Masses of the integer bins `-L..=L`.
    pub fn integer_pmf(&self) -> Vec<f64> {
        let l = self.half_width as i64;
        (-l..=l).map(|v| self.mass(v as f64)).collect()
    }
}

impl<T: Real> FactorizedPrior<T> {
    /// Uniform initialization: every increment equal.
    pub fn new(channels: usize) -> Self {
        Self::with_half_width(channels, PRIOR_HALF_WIDTH)
    }

    pub fn with_half_width(channels: usize, half_width: usize) -> Self {
        // softplus(ln(e - 1)) = 1
        let r = (std::f64::consts::E - 1.0).ln();
        Self {
            raw: Param::new(Tensor::full([channels, 2 * half_width], T::of(r))),
        }
    }

    pub fn channels(&self) -> usize {
        self.raw.value.shape()[0]
    }

    pub fn half_width(&self) -> usize {
        self.raw.value.shape()[1] / 2
    }

    pub fn cdf(&self, channel: usize) -> Cdf {
        let k = self.raw.value.shape()[1];
        let raw: Vec<f64> = self.raw.value.data()[channel * k..(channel + 1) * k]
            .iter()
            .map(|v| v.f64())
            .collect();
        Cdf::from_raw(&raw).0
    }

    /// Number of elements whose integer bin lies outside `[-L, L]`.
    pub fn overflow_count(&self, z: &Tensor<T>) -> usize {
        let l = self.half_width() as f64;
        z.data().iter().filter(|v| v.f64().round().abs() > l).count()
    }

    /// Floored likelihood of each element of `z` (`[n, C, h, w]`) under its
    /// channel's distribution. Differentiable in `z` and in the raw
    /// parameters.
    pub fn likelihood(&self, tape: &mut Tape<T>, z: Var) -> Result<Var> {
        let [n, c, h, w] = tape.value(z).dims4()?;
        if c != self.channels() {
            return Err(Error::ShapeMismatch {
                lhs: tape.shape(z).to_vec(),
                rhs: self.raw.value.shape().to_vec(),
                context: "factorized prior channels",
            });
        }
        let raw = self.raw.bind(tape);
        let k = self.raw.value.shape()[1];
        let cdfs: Vec<(Cdf, Vec<f64>, f64)> = (0..c)
            .map(|ch| {
                let r: Vec<f64> = self.raw.value.data()[ch * k..(ch + 1) * k]
                    .iter()
                    .map(|v| v.f64())
                    .collect();
                Cdf::from_raw(&r)
            })
            .collect();
        let hw = h * w;
        let zd = tape.value(z).data();
        let p: Vec<T> = zd
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = (i / hw) % c;
                T::of(cdfs[ch].0.mass(v.f64()).max(LIKELIHOOD_FLOOR))
            })
            .collect();
        let value = Tensor::new([n, c, h, w], p)?;
        tape.record(
            "factorized_likelihood",
            &[z, raw],
            value,
            Box::new(move |ctx| {
                let zd = ctx.inputs[0].data();
                let g = ctx.grad.data();
                let rd = ctx.inputs[1].data();
                let mut gz = vec![T::zero(); zd.len()];
                // d loss / d inc, accumulated as "all segments before j" counts
                // plus per-segment partial terms.
                let mut before = vec![vec![0.0f64; k + 1]; c];
                let mut partial = vec![vec![0.0f64; k]; c];
                for (i, &zv) in zd.iter().enumerate() {
                    let ch = (i / hw) % c;
                    let cdf = &cdfs[ch].0;
                    let x = zv.f64();
                    let gi = g[i].f64();
                    if !floor_passes(cdf.mass(x), gi) {
                        continue;
                    }
                    gz[i] = T::of(gi * (cdf.density(x + 0.5) - cdf.density(x - 0.5)));
                    for (edge, sign) in [(x + 0.5, 1.0), (x - 0.5, -1.0)] {
                        let l = cdf.half_width as f64;
                        if edge >= l {
                            // CDF pinned at 1 regardless of the increments.
                            continue;
                        }
                        if let Some((j, t)) = cdf.locate(edge) {
                            before[ch][j] += sign * gi;
                            partial[ch][j] += sign * gi * t;
                        }
                    }
                }
                let mut gr = vec![T::zero(); c * k];
                for ch in 0..c {
                    let (cdf, _, total) = &cdfs[ch];
                    // suffix sums: inc_i is "before" every j > i
                    let mut d_inc = vec![0.0; k];
                    let mut acc = 0.0;
                    for j in (0..k).rev() {
                        acc += before[ch][j + 1];
                        d_inc[j] = acc + partial[ch][j];
                    }
                    let dot: f64 = d_inc.iter().zip(&cdf.inc).map(|(a, b)| a * b).sum();
                    for m in 0..k {
                        let ds = (d_inc[m] - dot) / total;
                        gr[ch * k + m] = T::of(ds * sigmoid(rd[ch * k + m].f64()));
                    }
                }
                Ok(vec![
                    Some(Tensor::new(ctx.inputs[0].shape().to_vec(), gz)?),
                    Some(Tensor::new(ctx.inputs[1].shape().to_vec(), gr)?),
                ])
            }),
        )
    }
}

impl<T: Real> Module<T> for FactorizedPrior<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "raw"), &self.raw);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "raw"), &mut self.raw);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_module;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// `erf` by its Maclaurin series, summed until terms vanish.
    fn erf_series(x: f64) -> f64 {
        let mut term = x;
        let mut sum = x;
        let mut n = 0.0;
        while term.abs() > 1e-18 {
            n += 1.0;
            term *= -x * x / n;
            sum += term / (2.0 * n + 1.0);
        }
        sum * 2.0 / std::f64::consts::PI.sqrt()
    }

    fn likelihood_value(y: &[f64], mu: &[f64], sigma: &[f64]) -> Vec<f64> {
        let mut t = Tape::<f64>::new();
        let n = y.len();
        let y = t.constant(Tensor::from_f64([n], y).unwrap());
        let m = t.constant(Tensor::from_f64([n], mu).unwrap());
        let s = t.constant(Tensor::from_f64([n], sigma).unwrap());
        let p = gaussian_likelihood(&mut t, y, m, s).unwrap();
        t.value(p).to_f64_vec()
    }

    #[test]
    fn rounding_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = Tensor::<f64>::from_f64([4], &[0.4, -1.6, 2.5, -2.5]).unwrap();
        let q = Quantizer::TestRound.apply_tensor(&y, &mut rng);
        assert_eq!(q.data(), &[0.0, -2.0, 3.0, -3.0]);
    }

    #[test]
    fn noise_is_reproducible_and_bounded() {
        let y = Tensor::<f32>::from_fn([1000], |i| i as f32 * 0.37 - 100.0);
        let a = Quantizer::TrainNoise.apply_tensor(&y, &mut ChaCha8Rng::seed_from_u64(5));
        let b = Quantizer::TrainNoise.apply_tensor(&y, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
        for (o, i) in a.data().iter().zip(y.data()) {
            assert!((o - i).abs() <= 0.5);
        }
        assert!(a.data().iter().zip(y.data()).any(|(o, i)| o != i));
    }

    proptest! {
        #[test]
        fn round_is_idempotent_and_within_half(v in -1e6f64..1e6) {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let t = Tensor::<f64>::from_f64([1], &[v]).unwrap();
            let q = Quantizer::TestRound.apply_tensor(&t, &mut rng);
            prop_assert_eq!(&Quantizer::TestRound.apply_tensor(&q, &mut rng), &q);
            prop_assert!((q.item() - v).abs() <= 0.5);
            prop_assert_eq!(q.item().fract(), 0.0);
        }

        #[test]
        fn likelihood_is_in_range(y in -50f64..50.0, mu in -50f64..50.0, s in 0.11f64..100.0) {
            let p = likelihood_value(&[y], &[mu], &[s])[0];
            prop_assert!((LIKELIHOOD_FLOOR..=1.0).contains(&p));
        }

        #[test]
        fn rate_increases_when_any_probability_drops(ps in proptest::collection::vec(0.01f64..1.0, 1..20), idx in 0usize..20, f in 0.1f64..0.99) {
            let idx = idx % ps.len();
            let bits = |v: &[f64]| {
                let mut t = Tape::<f64>::new();
                let p = t.constant(Tensor::from_f64([v.len()], v).unwrap());
                let r = rate_bits(&mut t, &[p]).unwrap();
                t.value(r).item()
            };
            let mut lower = ps.clone();
            lower[idx] *= f;
            prop_assert!(bits(&ps) >= 0.0);
            prop_assert!(bits(&lower) > bits(&ps));
        }
    }

    #[test]
    fn centred_unit_gaussian_bin() {
        let oracle = erf_series(0.5 / std::f64::consts::SQRT_2);
        let p = likelihood_value(&[0.0], &[0.0], &[1.0])[0];
        assert!((p - oracle).abs() < 1e-12, "{p} vs {oracle}");
        assert!((p - 0.382925).abs() < 1e-6);
    }

    #[test]
    fn narrow_gaussian_concentrates_in_its_bin() {
        let p = likelihood_value(&[3.0, 3.0], &[3.0, 3.0], &[SIGMA_MIN, 0.01]);
        assert!(p[0] > 0.99999);
        assert!((p[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn gaussian_bins_are_symmetric_and_floored() {
        for k in 1..8 {
            let k = k as f64;
            let p = likelihood_value(&[k, -k], &[0.0, 0.0], &[1.7, 1.7]);
            assert!((p[0] - p[1]).abs() < 1e-15);
        }
        let far = likelihood_value(&[80.0], &[0.0], &[1.0])[0];
        assert_eq!(far, LIKELIHOOD_FLOOR);
    }

    #[test]
    fn tail_masses_keep_relative_precision() {
        // Upper tail bin at 6.5..7.5 sigma: compare with the complementary form.
        let direct = gaussian_bin_mass(7.0, 0.0, 1.0);
        let oracle = 0.5 * (libm::erfc(6.5 / std::f64::consts::SQRT_2) - libm::erfc(7.5 / std::f64::consts::SQRT_2));
        assert!(((direct - oracle) / oracle).abs() < 1e-12);
    }

    #[test]
    fn wide_gaussian_is_flat_over_small_range() {
        for sigma in [64.0, 100.0, 500.0] {
            let b = (sigma / 8.0f64).floor() as i64;
            let ps: Vec<f64> = (-b..=b).map(|v| gaussian_bin_mass(v as f64, 0.0, sigma)).collect();
            let max = ps.iter().cloned().fold(0.0, f64::max);
            let min = ps.iter().cloned().fold(1.0, f64::min);
            assert!(max / min <= 1.05, "sigma {sigma}: ratio {}", max / min);
        }
    }

    #[test]
    fn rate_examples_and_errors() {
        let mut t = Tape::<f64>::new();
        let half = t.constant(Tensor::full([2, 5], 0.5));
        let one = t.constant(Tensor::full([7], 1.0));
        let r = rate_bits(&mut t, &[half]).unwrap();
        assert!((t.value(r).item() - 10.0).abs() < 1e-12);
        let r = rate_bits(&mut t, &[one]).unwrap();
        assert_eq!(t.value(r).item(), 0.0);
        let r = rate_bits(&mut t, &[half, one]).unwrap();
        assert!((t.value(r).item() - 10.0).abs() < 1e-12);
        let zero = t.constant(Tensor::zeros([1]));
        assert!(matches!(rate_bits(&mut t, &[zero]), Err(Error::Probability(_))));
    }

    #[test]
    fn gaussian_gradients_match_finite_differences() {
        for seed in 0..3u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 24;
            // Kept away from the floor, where the gradient is straight-through
            // by design and finite differences see a flat function.
            let y = Tensor::from_fn([n], |_| rng.random_range(-2.0..2.0));
            let mu = Tensor::from_fn([n], |_| rng.random_range(-1.0..1.0));
            let sr = Tensor::from_fn([n], |_| rng.random_range(-1.0..2.0));
            check_module(
                "gaussian likelihood",
                &(),
                &[y, mu, sr],
                |_, t, v| {
                    let s = sigma_from_raw(t, v[2])?;
                    let p = gaussian_likelihood(t, v[0], v[1], s)?;
                    Ok(vec![t.ln(p)?])
                },
                1e-6,
                1e-5,
            )
            .unwrap();
        }
    }

    #[test]
    fn floored_likelihood_still_pulls_towards_the_data() {
        let mut t = Tape::<f64>::new();
        let y = t.constant(Tensor::from_f64([1], &[60.0]).unwrap());
        let mu = t.input(Tensor::from_f64([1], &[0.0]).unwrap());
        let s = t.constant(Tensor::from_f64([1], &[1.0]).unwrap());
        let p = gaussian_likelihood(&mut t, y, mu, s).unwrap();
        let r = rate_bits(&mut t, &[p]).unwrap();
        let g = t.backward(r).unwrap();
        // Rate falls as mu moves towards y.
        assert!(g.get(mu).unwrap().item() <= 0.0);
    }

    #[test]
    fn uniform_prior_pmf() {
        let fp = FactorizedPrior::<f64>::new(3);
        for ch in 0..3 {
            let pmf = fp.cdf(ch).integer_pmf();
            assert_eq!(pmf.len(), 61);
            for &p in &pmf[1..60] {
                assert!((p - 1.0 / 60.0).abs() < 1e-12);
            }
            assert!((pmf[0] - 1.0 / 120.0).abs() < 1e-12);
            assert!((pmf.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    fn random_prior(seed: u64, channels: usize) -> FactorizedPrior<f64> {
        let mut fp = FactorizedPrior::<f64>::new(channels);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        fp.raw.value = Tensor::from_fn(fp.raw.value.shape().to_vec(), |_| rng.random_range(-3.0..3.0));
        fp
    }

    #[test]
    fn trained_prior_pmf_sums_to_one_and_cdf_is_monotone() {
        let fp = random_prior(1, 2);
        for ch in 0..2 {
            let cdf = fp.cdf(ch);
            assert_eq!(cdf.cdf(-30.0), 0.0);
            assert_eq!(cdf.cdf(30.0), 1.0);
            let mut last = 0.0;
            for i in 0..=600 {
                let c = cdf.cdf(-30.0 + i as f64 * 0.1);
                assert!(c >= last);
                last = c;
            }
            assert!((cdf.integer_pmf().iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn out_of_support_values_are_floored_and_counted() {
        let fp = FactorizedPrior::<f64>::new(1);
        let z = Tensor::from_f64([1, 1, 1, 4], &[0.0, 31.0, -40.0, 30.0]).unwrap();
        assert_eq!(fp.overflow_count(&z), 2);
        let mut t = Tape::new();
        let zv = t.constant(z);
        let p = fp.likelihood(&mut t, zv).unwrap();
        let p = t.value(p).to_f64_vec();
        assert_eq!(p[1], LIKELIHOOD_FLOOR);
        assert_eq!(p[2], LIKELIHOOD_FLOOR);
        assert!((p[3] - 1.0 / 120.0).abs() < 1e-12);
    }

    #[test]
    fn factorized_gradients_match_finite_differences() {
        for seed in 0..3u64 {
            let fp = random_prior(seed + 10, 2);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut z = Tensor::from_fn([1, 2, 3, 3], |_| rng.random_range(-6.0..6.0));
            z.data_mut()[0] = 29.3;
            z.data_mut()[1] = -29.8;
            check_module(
                "factorized prior",
                &fp,
                &[z],
                |m, t, v| {
                    let p = m.likelihood(t, v[0])?;
                    Ok(vec![t.ln(p)?])
                },
                1e-6,
                1e-5,
            )
            .unwrap();
        }
    }
}
