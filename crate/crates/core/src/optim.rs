//! AdamW with decoupled weight decay and global-norm gradient clipping.

use std::collections::HashMap;

use crate::params::{clip_global_grad_norm, Parameterized};
use crate::tensor::{Scalar, Tensor};

/// Optimizer hyperparameters. Defaults follow the pretraining recipe:
/// betas (0.9, 0.95), eps 1e-6, weight decay 0.01, max grad norm 10.
#[derive(Clone, Copy, Debug)]
pub struct AdamWParams {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        AdamWParams {
            lr: 5e-4,
            betas: (0.9, 0.95),
            eps: 1e-6,
            weight_decay: 0.01,
            max_grad_norm: 10.0,
        }
    }
}

/// Per-parameter first/second moment buffers keyed by parameter name,
/// plus the step counter used for bias correction.
pub struct AdamW<T> {
    pub hp: AdamWParams,
    step: u64,
    moments: HashMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(hp: AdamWParams) -> Self {
        AdamW {
            hp,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Clip gradients to the configured global norm, then apply one AdamW
    /// step at learning rate `lr` to every parameter with an enabled
    /// gradient, skipping those matched by `frozen`. Frozen parameters
    /// receive neither the Adam update nor weight decay, and their moments
    /// are left untouched. Returns the pre-clip gradient norm.
    pub fn step<M: Parameterized<T>>(
        &mut self,
        model: &mut M,
        lr: f64,
        frozen: &dyn Fn(&str) -> bool,
    ) -> f64 {
        let norm = clip_global_grad_norm(model, self.hp.max_grad_norm);
        self.step += 1;
        let (b1, b2) = self.hp.betas;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let b1t = T::from_f64(b1);
        let b2t = T::from_f64(b2);
        let one_m_b1 = T::from_f64(1.0 - b1);
        let one_m_b2 = T::from_f64(1.0 - b2);
        let eps = T::from_f64(self.hp.eps);
        let lr_t = T::from_f64(lr);
        let decay_mult = T::from_f64(1.0 - lr * self.hp.weight_decay);
        let inv_bc1 = T::from_f64(1.0 / bc1);
        let inv_bc2 = T::from_f64(1.0 / bc2);
        let moments = &mut self.moments;
        model.visit_mut("", &mut |name, t: &mut Tensor<T>| {
            if !t.requires_grad() || frozen(name) {
                return;
            }
            let (m, v) = moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![T::zero(); t.len()], vec![T::zero(); t.len()]));
            assert_eq!(m.len(), t.len(), "moment buffer shape mismatch for {name}");
            let n = t.len();
            // Split borrows: decay first, then the moment update.
            for p in t.data_mut().iter_mut() {
                *p *= decay_mult;
            }
            let grad_ptr = t.grad().to_vec();
            let data = t.data_mut();
            for i in 0..n {
                let g = grad_ptr[i];
                m[i] = b1t * m[i] + one_m_b1 * g;
                v[i] = b2t * v[i] + one_m_b2 * g * g;
                let mhat = m[i] * inv_bc1;
                let vhat = v[i] * inv_bc2;
                data[i] -= lr_t * mhat / (vhat.sqrt() + eps);
            }
        });
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{global_grad_norm, Parameterized};
    use crate::tensor::Tensor;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Flat {
        p: Tensor<f64>,
    }

    impl Parameterized<f64> for Flat {
        fn visit(&self, _p: &str, f: &mut dyn FnMut(&str, &Tensor<f64>)) {
            f("p", &self.p);
        }
        fn visit_mut(&mut self, _p: &str, f: &mut dyn FnMut(&str, &mut Tensor<f64>)) {
            f("p", &mut self.p);
        }
        fn visit_pair(
            &self,
            other: &mut Self,
            _p: &str,
            f: &mut dyn FnMut(&str, &Tensor<f64>, &mut Tensor<f64>),
        ) {
            f("p", &self.p, &mut other.p);
        }
    }

    fn flat(vals: &[f64]) -> Flat {
        Flat {
            p: Tensor::from_vec(&[vals.len()], vals.to_vec()).with_grad(),
        }
    }

    #[test]
    fn decay_only_step_with_zero_gradient() {
        let mut model = flat(&[1.0]);
        let mut opt = AdamW::new(AdamWParams {
            lr: 5e-4,
            weight_decay: 0.01,
            ..Default::default()
        });
        opt.step(&mut model, 5e-4, &|_| false);
        assert_relative_eq!(model.p.data()[0], 0.999995, max_relative = 1e-15);
    }

    #[test]
    fn clipping_scales_by_half_at_double_norm() {
        // Gradient of global norm 20 against max_grad_norm 10.
        let mut model = flat(&[0.0, 0.0]);
        let g = 20.0 / (2.0f64).sqrt();
        model.p.add_to_grad(&[g, g]);
        let pre = crate::params::clip_global_grad_norm(&mut model, 10.0);
        assert_relative_eq!(pre, 20.0, max_relative = 1e-12);
        for &v in model.p.grad() {
            assert_relative_eq!(v, 0.5 * g, max_relative = 1e-12);
        }
    }

    #[test]
    fn clipping_is_idempotent_within_bound() {
        let mut model = flat(&[0.0, 0.0]);
        model.p.add_to_grad(&[3.0, 4.0]); // norm 5 <= 10
        let before = model.p.grad().to_vec();
        crate::params::clip_global_grad_norm(&mut model, 10.0);
        assert_eq!(model.p.grad(), &before[..]);
        crate::params::clip_global_grad_norm(&mut model, 10.0);
        assert_eq!(model.p.grad(), &before[..]);
        assert_relative_eq!(global_grad_norm(&model), 5.0, max_relative = 1e-12);
    }

    /// Scalar AdamW written out longhand, independent of the vectorized path.
    struct ScalarRef {
        m: f64,
        v: f64,
        t: u64,
    }

    impl ScalarRef {
        fn step(&mut self, p: f64, g: f64, lr: f64, b1: f64, b2: f64, eps: f64, wd: f64) -> f64 {
            self.t += 1;
            let p = p * (1.0 - lr * wd);
            self.m = b1 * self.m + (1.0 - b1) * g;
            self.v = b2 * self.v + (1.0 - b2) * g * g;
            let mhat = self.m / (1.0 - b1.powi(self.t as i32));
            let vhat = self.v / (1.0 - b2.powi(self.t as i32));
            p - lr * mhat / (vhat.sqrt() + eps)
        }
    }

    #[test]
    fn one_dim_trajectory_matches_scalar_reference() {
        let mut model = flat(&[0.0]);
        let mut opt = AdamW::new(AdamWParams {
            lr: 1e-2,
            weight_decay: 0.0,
            max_grad_norm: f64::INFINITY,
            ..Default::default()
        });
        let mut reference = ScalarRef { m: 0.0, v: 0.0, t: 0 };
        let mut p_ref = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for step in 0..25 {
            let g: f64 = if step == 0 { 1.0 } else { rng.gen_range(-2.0..2.0) };
            model.p.zero_grad();
            model.p.add_to_grad(&[g]);
            opt.step(&mut model, 1e-2, &|_| false);
            p_ref = reference.step(p_ref, g, 1e-2, 0.9, 0.95, 1e-6, 0.0);
            assert!(
                (model.p.data()[0] - p_ref).abs() < 1e-12,
                "step {step}: {} vs {}",
                model.p.data()[0],
                p_ref
            );
        }
        // First step from zero with grad 1 moves by about -lr (bias-corrected).
        let first = ScalarRef { m: 0.0, v: 0.0, t: 0 }.step(0.0, 1.0, 1e-2, 0.9, 0.95, 1e-6, 0.0);
        assert_relative_eq!(first, -1e-2 / (1.0 + 1e-6), max_relative = 1e-9);
    }

    #[test]
    fn frozen_parameters_are_untouched() {
        let mut model = flat(&[1.0, 1.0]);
        model.p.add_to_grad(&[0.5, 0.5]);
        let mut opt = AdamW::new(AdamWParams::default());
        opt.step(&mut model, 1e-3, &|name| name == "p");
        assert_eq!(model.p.data(), &[1.0, 1.0]);
    }
}
