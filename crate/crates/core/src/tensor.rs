//! Dense row-major tensors with optional gradient buffers.
//!
//! Everything downstream (encoder, losses, metrics) runs on these. The
//! element type is generic over [`Scalar`] so the same code paths serve
//! single precision for training and double precision for gradient checks.

use std::fmt;

use num_traits::Float;
use rand::Rng;
use rand_distr::StandardNormal;

/// Element types the numeric stack is instantiated over (`f32` or `f64`).
pub trait Scalar:
    Float + num_traits::NumAssign + Send + Sync + fmt::Debug + fmt::Display + 'static
{
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense real array, row-major. `grad`, when enabled, always matches
/// `data` in length; that pairing is the only autograd state we keep —
/// backward passes are written by hand per layer.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
            grad: None,
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
            grad: None,
        }
    }

    /// Standard-normal entries scaled by `scale`.
    pub fn randn<R: Rng>(shape: &[usize], scale: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                T::from_f64(z * scale)
            })
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
        }
    }

    /// Uniform entries in `[-bound, bound]`.
    pub fn rand_uniform<R: Rng>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64(rng.gen_range(-bound..=bound)))
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows when viewed as a 2-D matrix.
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() on non-2D tensor {:?}", self.shape);
        self.shape[0]
    }

    /// Number of columns when viewed as a 2-D matrix.
    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() on non-2D tensor {:?}", self.shape);
        self.shape[1]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        let d = self.cols();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let d = self.cols();
        &mut self.data[i * d..(i + 1) * d]
    }

    pub fn requires_grad(&self) -> bool {
        self.grad.is_some()
    }

    /// Attach a zeroed gradient buffer (idempotent).
    pub fn enable_grad(&mut self) {
        if self.grad.is_none() {
            self.grad = Some(vec![T::zero(); self.data.len()]);
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.enable_grad();
        self
    }

    /// Drop the gradient buffer (used for gradient-free parameter copies
    /// such as the teacher).
    pub fn disable_grad(&mut self) {
        self.grad = None;
    }

    pub fn grad(&self) -> &[T] {
        self.grad.as_deref().expect("gradient buffer not enabled")
    }

    pub fn grad_mut(&mut self) -> &mut [T] {
        self.grad.as_deref_mut().expect("gradient buffer not enabled")
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_deref_mut() {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Accumulate `delta` into the gradient buffer.
    pub fn add_to_grad(&mut self, delta: &[T]) {
        let g = self.grad.as_deref_mut().expect("gradient buffer not enabled");
        assert_eq!(g.len(), delta.len(), "gradient accumulation shape mismatch");
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += *di;
        }
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.data.iter()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn assert_finite(&self, what: &str) {
        assert!(self.is_finite(), "non-finite values in {what}");
    }

    /// Convert the element type (used to build an f64 twin for grad checks).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|v| U::from_f64(v.as_f64())).collect()),
        }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " [{} values]", self.data.len())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;
    use rand::SeedableRng;

    #[test]
    fn shape_and_data_invariant() {
        let t = Tensor::<f32>::zeros(&[3, 4]);
        assert_eq!(t.len(), 12);
        assert_eq!(t.rows(), 3);
        assert_eq!(t.cols(), 4);
    }

    #[test]
    #[should_panic(expected = "does not match")]
    fn from_vec_rejects_bad_shape() {
        let _ = Tensor::<f32>::from_vec(&[2, 2], vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn grad_buffer_matches_shape() {
        let mut t = Tensor::<f64>::zeros(&[2, 5]);
        t.enable_grad();
        assert!(t.requires_grad());
        assert_eq!(t.grad().len(), t.len());
        t.add_to_grad(&vec![1.0; 10]);
        t.add_to_grad(&vec![0.5; 10]);
        assert!(t.grad().iter().all(|&g| g == 1.5));
        t.zero_grad();
        assert!(t.grad().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn randn_deterministic_given_seed() {
        let mut r1 = ChaCha8Rng::seed_from_u64(7);
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::<f32>::randn(&[4, 4], 0.1, &mut r1);
        let b = Tensor::<f32>::randn(&[4, 4], 0.1, &mut r2);
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn cast_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::<f64>::randn(&[3, 3], 1.0, &mut rng);
        let b: Tensor<f32> = a.cast();
        let c: Tensor<f64> = b.cast();
        for (x, y) in a.iter().zip(c.iter()) {
            assert!((x - y).abs() < 1e-6);
        }
    }
}
