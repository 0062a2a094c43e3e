//! Central finite differences, the reference every backward rule is checked
//! against.

use crate::error::{Error, Result};
use crate::layers::Module;
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `(f(x + eps e_i) - f(x - eps e_i)) / 2 eps` for every element `i`.
pub fn finite_diff_grad<T, F>(mut f: F, x: &Tensor<T>, eps: f64) -> Result<Tensor<T>>
where
    T: Real,
    F: FnMut(&Tensor<T>) -> Result<T>,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::Config(format!(
            "finite-difference step must be positive, got {eps}"
        )));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = x.data()[i];
        let mut central = |h: f64| -> Result<f64> {
            probe.data_mut()[i] = orig + T::of(h);
            let up = f(&probe)?.f64();
            probe.data_mut()[i] = orig - T::of(h);
            let down = f(&probe)?.f64();
            probe.data_mut()[i] = orig;
            Ok((up - down) / (2.0 * h))
        };
        let coarse = central(eps)?;
        let fine = central(eps / 2.0)?;
        grad.push(T::of((4.0 * fine - coarse) / 3.0));
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// Richardson-extrapolated central differences (steps `eps` and `eps / 2`)
/// at the listed coordinates only, returned as a 1-d tensor in that order.
pub fn finite_diff_at<T, F>(mut f: F, x: &Tensor<T>, eps: f64, idx: &[usize]) -> Result<Tensor<T>>
where
    T: Real,
    F: FnMut(&Tensor<T>) -> Result<T>,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::Config(format!(
            "finite-difference step must be positive, got {eps}"
        )));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(idx.len());
    for &i in idx {
        let orig = x.data()[i];
        let mut central = |h: f64| -> Result<f64> {
            probe.data_mut()[i] = orig + T::of(h);
            let up = f(&probe)?.f64();
            probe.data_mut()[i] = orig - T::of(h);
            let down = f(&probe)?.f64();
            probe.data_mut()[i] = orig;
            Ok((up - down) / (2.0 * h))
        };
        let coarse = central(eps)?;
        let fine = central(eps / 2.0)?;
        grad.push(T::of((4.0 * fine - coarse) / 3.0));
    }
    Tensor::new([idx.len()], grad)
}

fn spread(n: usize, k: usize) -> Vec<usize> {
    if k >= n {
        return (0..n).collect();
    }
    (0..k).map(|j| j * n / k + (n / k) / 2).collect()
}

fn pick<T: Real>(t: &Tensor<T>, idx: &[usize]) -> Tensor<T> {
    Tensor::new([idx.len()], idx.iter().map(|&i| t.data()[i]).collect()).expect("length matches")
}

/// `max |a - b| / max(max |a|, max |b|)`; zero when both are identically zero.
pub fn relative_error<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    let scale = a.max_abs().f64().max(b.max_abs().f64());
    if scale == 0.0 {
        return 0.0;
    }
    let diff = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.f64() - y.f64()).abs())
        .fold(0.0, f64::max);
    diff / scale
}

/// Panics with a readable report when the two gradients disagree.
pub fn assert_grads_match<T: Real>(what: &str, autodiff: &Tensor<T>, numeric: &Tensor<T>, rtol: f64) {
    assert_eq!(autodiff.shape(), numeric.shape(), "{what}: gradient shapes differ");
    let err = relative_error(autodiff, numeric);
    assert!(
        err <= rtol,
        "{what}: relative gradient error {err:.3e} exceeds {rtol:.0e}\n autodiff: {:?}\n numeric:  {:?}",
        &autodiff.data()[..autodiff.numel().min(8)],
        &numeric.data()[..numeric.numel().min(8)],
    );
}

/// Fixed pseudo-random projection weights so that a multi-output function can
/// be reduced to a scalar loss with no symmetric cancellations.
fn projection(n: usize, salt: usize) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let h =
                (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (salt as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            ((h >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
        .collect()
}

fn projected_loss<M, F>(module: &M, inputs: &[Tensor<f64>], run: &F) -> Result<(Tape<f64>, Vec<Var>, Var)>
where
    M: Module<f64>,
    F: Fn(&M, &mut Tape<f64>, &[Var]) -> Result<Vec<Var>>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.input(x.clone())).collect();
    let outs = run(module, &mut tape, &vars)?;
    let mut total = None;
    for (salt, out) in outs.into_iter().enumerate() {
        let shape = tape.shape(out).to_vec();
        let w = Tensor::new(shape.clone(), projection(shape.iter().product(), salt))?;
        let w = tape.constant(w);
        let p = tape.mul(out, w)?;
        let s = tape.sum(p)?;
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    let loss = total.ok_or_else(|| Error::Config("function has no outputs".into()))?;
    Ok((tape, vars, loss))
}

/// Compare backpropagated gradients of every input and every parameter of
/// `module` against central finite differences.
pub fn check_module<M, F>(what: &str, module: &M, inputs: &[Tensor<f64>], run: F, eps: f64, rtol: f64) -> Result<()>
where
    M: Module<f64> + Clone,
    F: Fn(&M, &mut Tape<f64>, &[Var]) -> Result<Vec<Var>>,
{
    check_module_sampled(what, module, inputs, run, eps, rtol, usize::MAX)
}

/// Like [`check_module`], but probes at most `per_tensor` evenly spaced
/// coordinates of each input and parameter.
pub fn check_module_sampled<M, F>(
    what: &str,
    module: &M,
    inputs: &[Tensor<f64>],
    run: F,
    eps: f64,
    rtol: f64,
    per_tensor: usize,
) -> Result<()>
where
    M: Module<f64> + Clone,
    F: Fn(&M, &mut Tape<f64>, &[Var]) -> Result<Vec<Var>>,
{
    let (tape, vars, loss) = projected_loss(module, inputs, &run)?;
    let grads = tape.backward(loss)?;
    let scalar = |m: &M, xs: &[Tensor<f64>]| -> Result<f64> {
        let (t, _, l) = projected_loss(m, xs, &run)?;
        Ok(t.value(l).item())
    };
    for (i, x) in inputs.iter().enumerate() {
        let idx = spread(x.numel(), per_tensor);
        let numeric = finite_diff_at(
            |probe| {
                let mut xs = inputs.to_vec();
                xs[i] = probe.clone();
                scalar(module, &xs)
            },
            x,
            eps,
            &idx,
        )?;
        let auto = grads.get(vars[i]).cloned().unwrap_or_else(|| x.zeros_like());
        assert_grads_match(&format!("{what}: input {i}"), &pick(&auto, &idx), &numeric, rtol);
    }
    let mut names = Vec::new();
    module.visit("", &mut |name, p| {
        names.push((name.to_string(), p.id(), p.value.clone()))
    });
    for (name, id, value) in names {
        let idx = spread(value.numel(), per_tensor);
        let numeric = finite_diff_at(
            |probe| {
                let mut m = module.clone();
                m.visit_mut("", &mut |n, p| {
                    if n == name {
                        p.value = probe.clone();
                    }
                });
                scalar(&m, inputs)
            },
            &value,
            eps,
            &idx,
        )?;
        let auto = grads.param(id).cloned().unwrap_or_else(|| value.zeros_like());
        assert_grads_match(&format!("{what}: {name}"), &pick(&auto, &idx), &numeric, rtol);
    }
    Ok(())
}
