//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::layers::Module;
use crate::real::Real;
use crate::tape::Gradients;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Real = f32> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Updates applied so far.
    pub step: u64,
    /// Parameter names in visit order.
    pub names: Vec<String>,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    /// Zero moments shaped like the parameters of `module`.
    pub fn new(module: &impl Module<T>) -> Self {
        let mut names = Vec::new();
        let mut m = Vec::new();
        module.visit("", &mut |name, p| {
            names.push(name.to_string());
            m.push(p.value.zeros_like());
        });
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            names,
            v: m.clone(),
            m,
        }
    }
}

/// Gradients of every parameter of `module` in visit order; parameters the
/// loss never reached get zeros.
pub fn collect_grads<T: Real>(module: &impl Module<T>, grads: &Gradients<T>) -> Vec<Tensor<T>> {
    let mut out = Vec::new();
    module.visit("", &mut |_, p| {
        out.push(grads.param(p.id()).cloned().unwrap_or_else(|| p.value.zeros_like()));
    });
    out
}

pub fn global_norm<T: Real>(grads: &[Tensor<T>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v.f64() * v.f64())
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = T::of(max_norm / norm);
        for g in grads.iter_mut() {
            *g = g.map(|v| v * s);
        }
    }
    norm
}

/// One Adam update of every parameter of `module`.
pub fn adam_step<T: Real>(
    module: &mut impl Module<T>,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    if grads.len() != state.m.len() {
        return Err(Error::Config(format!(
            "{} gradients for {} optimizer slots",
            grads.len(),
            state.m.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.shape() != state.m[i].shape() {
            return Err(Error::ShapeMismatch {
                lhs: g.shape().to_vec(),
                rhs: state.m[i].shape().to_vec(),
                context: "adam gradient",
            });
        }
    }
    let mut count = 0;
    let mut shapes_ok = true;
    module.visit("", &mut |_, p| {
        shapes_ok &= state.m.get(count).is_some_and(|m| m.shape() == p.value.shape());
        count += 1;
    });
    if !shapes_ok || count != state.m.len() {
        return Err(Error::Config("optimizer state does not match the model".into()));
    }

    state.step += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    let mut i = 0;
    module.visit_mut("", &mut |_, p| {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let w = p.value.data_mut();
        for j in 0..w.len() {
            let gj = g[j].f64();
            let mj = b1 * m[j].f64() + (1.0 - b1) * gj;
            let vj = b2 * v[j].f64() + (1.0 - b2) * gj * gj;
            m[j] = T::of(mj);
            v[j] = T::of(vj);
            let update = lr * (mj / c1) / ((vj / c2).sqrt() + eps);
            w[j] = T::of(w[j].f64() - update);
        }
        i += 1;
    });
    Ok(())
}
