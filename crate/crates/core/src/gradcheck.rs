//! Central-difference gradient verification. Double precision only; this is
//! the oracle every hand-written backward pass in the crate is validated
//! against.

use rand::seq::index::sample;
use rand::Rng;

/// Max over coordinates of `|analytic − central difference| / max(1, |analytic|)`.
///
/// `f` must be re-evaluable at perturbed points; `analytic` is the gradient
/// produced by the backward pass under test. Panics if `f` returns a
/// non-finite value at any probe point.
pub fn grad_check<F>(mut f: F, point: &[f64], analytic: &[f64], eps: f64) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(point.len(), analytic.len(), "gradient length mismatch");
    let mut x = point.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let err = coord_error(&mut f, &mut x, analytic, eps, i);
        worst = worst.max(err);
    }
    worst
}

/// Same check restricted to `max_coords` randomly sampled coordinates —
/// used for whole-model checks where the parameter count makes the full
/// sweep too slow.
pub fn grad_check_sampled<F, R>(
    mut f: F,
    point: &[f64],
    analytic: &[f64],
    eps: f64,
    max_coords: usize,
    rng: &mut R,
) -> f64
where
    F: FnMut(&[f64]) -> f64,
    R: Rng,
{
    assert_eq!(point.len(), analytic.len(), "gradient length mismatch");
    if point.len() <= max_coords {
        return grad_check(f, point, analytic, eps);
    }
    let mut x = point.to_vec();
    let mut worst = 0.0f64;
    for i in sample(rng, point.len(), max_coords) {
        let err = coord_error(&mut f, &mut x, analytic, eps, i);
        worst = worst.max(err);
    }
    worst
}

fn coord_error<F>(f: &mut F, x: &mut [f64], analytic: &[f64], eps: f64, i: usize) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    let orig = x[i];
    x[i] = orig + eps;
    let fp = f(x);
    x[i] = orig - eps;
    let fm = f(x);
    x[i] = orig;
    assert!(
        fp.is_finite() && fm.is_finite(),
        "non-finite function value during grad check at coordinate {i}"
    );
    let numeric = (fp - fm) / (2.0 * eps);
    (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_function_has_zero_error() {
        // Dyadic point and power-of-two eps keep every difference exact,
        // so the central difference reproduces the all-ones gradient with
        // literally zero error.
        let point = vec![0.25, -1.5, 4.0];
        let analytic = vec![1.0; 3];
        let eps = (2.0f64).powi(-17);
        let err = grad_check(|x| x.iter().sum(), &point, &analytic, eps);
        assert_eq!(err, 0.0);
    }

    #[test]
    fn softmax_dot_onehot_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let point = Tensor::<f64>::randn(&[1, 8], 1.0, &mut rng);
        let target = 3usize;
        let f = |x: &[f64]| {
            let t = Tensor::from_vec(&[1, 8], x.to_vec());
            ops::softmax(&t).data()[target]
        };
        // d softmax_t / d x = y_t·(onehot_t − y)
        let y = ops::softmax(&point);
        let yt = y.data()[target];
        let analytic: Vec<f64> = (0..8)
            .map(|j| yt * (if j == target { 1.0 } else { 0.0 } - y.data()[j]))
            .collect();
        let err = grad_check(f, point.data(), &analytic, 1e-5);
        assert!(err < 1e-6, "softmax grad check error {err}");
    }

    #[test]
    fn sampled_check_subsets_full_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let point: Vec<f64> = (0..64).map(|i| (i as f64) * 0.1 - 3.0).collect();
        let analytic: Vec<f64> = point.iter().map(|&x| 2.0 * x).collect();
        let f = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        let err = grad_check_sampled(f, &point, &analytic, 1e-6, 16, &mut rng);
        assert!(err < 1e-8, "quadratic sampled grad check error {err}");
    }
}
