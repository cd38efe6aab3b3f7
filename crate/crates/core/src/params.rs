//! Named-parameter traversal. Model types implement [`Parameterized`] so the
//! optimizer, the teacher EMA, checkpointing, and the grad-check harness can
//! walk every trainable tensor in a stable order without knowing the model
//! structure.

use crate::tensor::{Scalar, Tensor};

pub trait Parameterized<T: Scalar> {
    /// Visit every parameter in a deterministic order.
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>));

    /// Mutable variant of [`Parameterized::visit`], same order.
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>));

    /// Walk two identically-shaped trees in lockstep (`self` read-only,
    /// `other` mutable). Used by the teacher EMA update. Implementations
    /// must panic on any structural mismatch.
    fn visit_pair(
        &self,
        other: &mut Self,
        prefix: &str,
        f: &mut dyn FnMut(&str, &Tensor<T>, &mut Tensor<T>),
    );
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Total number of scalar parameters.
pub fn param_count<T: Scalar, M: Parameterized<T>>(model: &M) -> usize {
    let mut n = 0;
    model.visit("", &mut |_, t| n += t.len());
    n
}

/// Zero every enabled gradient buffer in the tree.
pub fn zero_grads<T: Scalar, M: Parameterized<T>>(model: &mut M) {
    model.visit_mut("", &mut |_, t| t.zero_grad());
}

/// Flatten all parameter values into one `f64` vector (visit order).
pub fn flatten<T: Scalar, M: Parameterized<T>>(model: &M) -> Vec<f64> {
    let mut out = Vec::new();
    model.visit("", &mut |_, t| out.extend(t.iter().map(|v| v.as_f64())));
    out
}

/// Flatten all gradients into one `f64` vector (visit order).
pub fn flatten_grads<T: Scalar, M: Parameterized<T>>(model: &M) -> Vec<f64> {
    let mut out = Vec::new();
    model.visit("", &mut |_, t| out.extend(t.grad().iter().map(|v| v.as_f64())));
    out
}

/// Overwrite all parameters from a flat `f64` vector (visit order).
pub fn load_flat<T: Scalar, M: Parameterized<T>>(model: &mut M, flat: &[f64]) {
    let mut pos = 0;
    model.visit_mut("", &mut |_, t| {
        let n = t.len();
        for (dst, &src) in t.data_mut().iter_mut().zip(&flat[pos..pos + n]) {
            *dst = T::from_f64(src);
        }
        pos += n;
    });
    assert_eq!(pos, flat.len(), "flat parameter vector length mismatch");
}

/// Global L2 norm of all gradients, accumulated in f64.
pub fn global_grad_norm<T: Scalar, M: Parameterized<T>>(model: &M) -> f64 {
    let mut acc = 0.0f64;
    model.visit("", &mut |_, t| {
        for &g in t.grad() {
            let g = g.as_f64();
            acc += g * g;
        }
    });
    acc.sqrt()
}

/// Scale every gradient so the global norm does not exceed `max_norm`.
/// No-op (idempotent) when the norm is already within bounds.
/// Returns the pre-clip norm.
pub fn clip_global_grad_norm<T: Scalar, M: Parameterized<T>>(model: &mut M, max_norm: f64) -> f64 {
    let norm = global_grad_norm(model);
    if norm > max_norm {
        let scale = T::from_f64(max_norm / norm);
        model.visit_mut("", &mut |_, t| {
            for g in t.grad_mut() {
                *g *= scale;
            }
        });
    }
    norm
}
