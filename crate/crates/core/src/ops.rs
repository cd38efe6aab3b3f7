//! Forward and backward kernels for the fixed op set the models are built
//! from: matmul, add, mul, conv1d, gelu, softmax, layer_norm, instance_norm,
//! embedding_lookup, cross_entropy.
//!
//! Backward functions are pure: they take the saved forward operands and the
//! upstream gradient and return input/parameter gradients. Layers accumulate
//! the returned buffers into their own grad storage. Shape mismatches panic;
//! value-level failures (non-finite results) are the caller's responsibility
//! to check at loss boundaries.

use rayon::prelude::*;

use crate::tensor::{Scalar, Tensor};

/// Matrix product `[m×k]·[k×n] -> [m×n]`, row-parallel.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (m, ka) = (a.rows(), a.cols());
    let (kb, n) = (b.rows(), b.cols());
    assert_eq!(ka, kb, "matmul inner dims {ka} vs {kb}");
    let mut out = vec![T::zero(); m * n];
    let bd = b.data();
    out.par_chunks_mut(n).enumerate().for_each(|(i, orow)| {
        let arow = a.row(i);
        for (p, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    });
    Tensor::from_vec(&[m, n], out)
}

/// `[m×k]·[n×k]^T -> [m×n]`; contiguous row dots, used by linear layers.
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (m, ka) = (a.rows(), a.cols());
    let (n, kb) = (b.rows(), b.cols());
    assert_eq!(ka, kb, "matmul_nt inner dims {ka} vs {kb}");
    let mut out = vec![T::zero(); m * n];
    out.par_chunks_mut(n).enumerate().for_each(|(i, orow)| {
        let arow = a.row(i);
        for (j, o) in orow.iter_mut().enumerate() {
            *o = dot(arow, b.row(j));
        }
    });
    Tensor::from_vec(&[m, n], out)
}

/// `[k×m]^T·[k×n] -> [m×n]`.
pub fn matmul_tn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (ka, m) = (a.rows(), a.cols());
    let (kb, n) = (b.rows(), b.cols());
    assert_eq!(ka, kb, "matmul_tn inner dims {ka} vs {kb}");
    let mut out = vec![T::zero(); m * n];
    for p in 0..ka {
        let arow = a.row(p);
        let brow = b.row(p);
        for (i, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::from_vec(&[m, n], out)
}

pub fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let ga = matmul_nt(grad_out, b);
    let gb = matmul_tn(a, grad_out);
    (ga, gb)
}

pub fn transpose<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (m, n) = (x.rows(), x.cols());
    let xd = x.data();
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = xd[i * n + j];
        }
    }
    Tensor::from_vec(&[n, m], out)
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Elementwise sum of two same-shape tensors.
pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert_eq!(a.shape(), b.shape(), "add shape mismatch");
    let data = a.iter().zip(b.iter()).map(|(&x, &y)| x + y).collect();
    Tensor::from_vec(a.shape(), data)
}

pub fn add_backward<T: Scalar>(grad_out: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    (grad_out.clone(), grad_out.clone())
}

/// Hadamard product of two same-shape tensors.
pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert_eq!(a.shape(), b.shape(), "mul shape mismatch");
    let data = a.iter().zip(b.iter()).map(|(&x, &y)| x * y).collect();
    Tensor::from_vec(a.shape(), data)
}

pub fn mul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    (mul(grad_out, b), mul(grad_out, a))
}

/// 1-D convolution over time. Input is `[t×c_in]` (one frame per row),
/// weights are `[c_out, k, c_in/groups]`, output `[t_out×c_out]` with
/// `t_out = floor((t + 2·padding − k)/stride) + 1`. Zero padding.
pub fn conv1d<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Tensor<T> {
    let (t_in, c_in) = (x.rows(), x.cols());
    let wshape = weight.shape();
    assert_eq!(wshape.len(), 3, "conv1d weight must be [c_out, k, c_in/groups]");
    let (c_out, k, c_in_g) = (wshape[0], wshape[1], wshape[2]);
    assert_eq!(c_in_g * groups, c_in, "conv1d channel/group mismatch");
    assert_eq!(c_out % groups, 0, "conv1d c_out not divisible by groups");
    assert!(stride >= 1);
    assert!(
        t_in + 2 * padding >= k,
        "conv1d input too short: t={t_in} padding={padding} kernel={k}"
    );
    let t_out = (t_in + 2 * padding - k) / stride + 1;
    let co_per_g = c_out / groups;
    let wd = weight.data();
    let xd = x.data();
    let mut out = vec![T::zero(); t_out * c_out];
    out.par_chunks_mut(c_out).enumerate().for_each(|(tau, orow)| {
        for (co, o) in orow.iter_mut().enumerate() {
            let g = co / co_per_g;
            let ci0 = g * c_in_g;
            let mut acc = match bias {
                Some(b) => b.data()[co],
                None => T::zero(),
            };
            let wrow = &wd[co * k * c_in_g..(co + 1) * k * c_in_g];
            for j in 0..k {
                let t = (tau * stride + j) as isize - padding as isize;
                if t < 0 || t >= t_in as isize {
                    continue;
                }
                let xrow = &xd[t as usize * c_in + ci0..t as usize * c_in + ci0 + c_in_g];
                acc += dot(&wrow[j * c_in_g..(j + 1) * c_in_g], xrow);
            }
            *o = acc;
        }
    });
    Tensor::from_vec(&[t_out, c_out], out)
}

/// Gradients of [`conv1d`] w.r.t. input, weight, and bias.
pub fn conv1d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    has_bias: bool,
    stride: usize,
    padding: usize,
    groups: usize,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Option<Tensor<T>>) {
    let (t_in, c_in) = (x.rows(), x.cols());
    let wshape = weight.shape();
    let (c_out, k, c_in_g) = (wshape[0], wshape[1], wshape[2]);
    let co_per_g = c_out / groups;
    let t_out = grad_out.rows();
    assert_eq!(grad_out.cols(), c_out);
    let wd = weight.data();
    let xd = x.data();
    let gd = grad_out.data();

    let mut gx = vec![T::zero(); t_in * c_in];
    for tau in 0..t_out {
        let grow = &gd[tau * c_out..(tau + 1) * c_out];
        for (co, &gv) in grow.iter().enumerate() {
            if gv == T::zero() {
                continue;
            }
            let g = co / co_per_g;
            let ci0 = g * c_in_g;
            let wrow = &wd[co * k * c_in_g..(co + 1) * k * c_in_g];
            for j in 0..k {
                let t = (tau * stride + j) as isize - padding as isize;
                if t < 0 || t >= t_in as isize {
                    continue;
                }
                let dst = &mut gx[t as usize * c_in + ci0..t as usize * c_in + ci0 + c_in_g];
                for (d, &w) in dst.iter_mut().zip(&wrow[j * c_in_g..(j + 1) * c_in_g]) {
                    *d += gv * w;
                }
            }
        }
    }

    let mut gw = vec![T::zero(); c_out * k * c_in_g];
    gw.par_chunks_mut(k * c_in_g).enumerate().for_each(|(co, gwrow)| {
        let g = co / co_per_g;
        let ci0 = g * c_in_g;
        for tau in 0..t_out {
            let gv = gd[tau * c_out + co];
            if gv == T::zero() {
                continue;
            }
            for j in 0..k {
                let t = (tau * stride + j) as isize - padding as isize;
                if t < 0 || t >= t_in as isize {
                    continue;
                }
                let xrow = &xd[t as usize * c_in + ci0..t as usize * c_in + ci0 + c_in_g];
                let dst = &mut gwrow[j * c_in_g..(j + 1) * c_in_g];
                for (d, &xv) in dst.iter_mut().zip(xrow) {
                    *d += gv * xv;
                }
            }
        }
    });

    let gb = if has_bias {
        let mut b = vec![T::zero(); c_out];
        for tau in 0..t_out {
            for (co, bv) in b.iter_mut().enumerate() {
                *bv += gd[tau * c_out + co];
            }
        }
        Some(Tensor::from_vec(&[c_out], b))
    } else {
        None
    };

    (
        Tensor::from_vec(&[t_in, c_in], gx),
        Tensor::from_vec(&[c_out, k, c_in_g], gw),
        gb,
    )
}

/// Output length of a single conv layer: `floor((t + 2p − k)/s) + 1`.
pub fn conv1d_out_len(t_in: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (t_in + 2 * padding - kernel) / stride + 1
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// GELU in the tanh form: `0.5·x·(1 + tanh(√(2/π)(x + 0.044715·x³)))`.
pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let data = x.iter().map(|&v| gelu_scalar(v)).collect();
    Tensor::from_vec(x.shape(), data)
}

#[inline]
pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (T::one() + u.tanh())
}

#[inline]
fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let th = u.tanh();
    let sech2 = T::one() - th * th;
    half * (T::one() + th) + half * x * sech2 * c * (T::one() + three * a * x * x)
}

pub fn gelu_backward<T: Scalar>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    assert_eq!(x.shape(), grad_out.shape());
    let data = x
        .iter()
        .zip(grad_out.iter())
        .map(|(&v, &g)| g * gelu_grad_scalar(v))
        .collect();
    Tensor::from_vec(x.shape(), data)
}

/// Row-wise softmax of a `[n×d]` tensor.
pub fn softmax<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (n, d) = (x.rows(), x.cols());
    let mut out = vec![T::zero(); n * d];
    for i in 0..n {
        softmax_row(x.row(i), &mut out[i * d..(i + 1) * d]);
    }
    Tensor::from_vec(&[n, d], out)
}

#[inline]
pub fn softmax_row<T: Scalar>(row: &[T], out: &mut [T]) {
    let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut z = T::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - mx).exp();
        *o = e;
        z += e;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

/// Row-wise log-softmax (stable log-sum-exp form).
pub fn log_softmax_row<T: Scalar>(row: &[T], out: &mut [T]) {
    let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut z = T::zero();
    for &v in row {
        z += (v - mx).exp();
    }
    let lz = z.ln() + mx;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v - lz;
    }
}

/// Backward through row-wise softmax given the forward output `y`.
pub fn softmax_backward<T: Scalar>(y: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    assert_eq!(y.shape(), grad_out.shape());
    let (n, d) = (y.rows(), y.cols());
    let mut gx = vec![T::zero(); n * d];
    for i in 0..n {
        let yr = y.row(i);
        let gr = grad_out.row(i);
        let s = dot(yr, gr);
        let dst = &mut gx[i * d..(i + 1) * d];
        for ((o, &yv), &gv) in dst.iter_mut().zip(yr).zip(gr) {
            *o = yv * (gv - s);
        }
    }
    Tensor::from_vec(&[n, d], gx)
}

/// Layer norm over the last axis of `[n×d]`, biased variance,
/// optional learned affine.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: Option<&Tensor<T>>,
    beta: Option<&Tensor<T>>,
    eps: T,
) -> Tensor<T> {
    let (n, d) = (x.rows(), x.cols());
    let dn = T::from_f64(d as f64);
    let mut out = vec![T::zero(); n * d];
    for i in 0..n {
        let row = x.row(i);
        let mean = row.iter().fold(T::zero(), |a, &v| a + v) / dn;
        let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / dn;
        let inv = (var + eps).sqrt().recip();
        let dst = &mut out[i * d..(i + 1) * d];
        for (j, (o, &v)) in dst.iter_mut().zip(row).enumerate() {
            let mut y = (v - mean) * inv;
            if let Some(g) = gamma {
                y = y * g.data()[j];
            }
            if let Some(b) = beta {
                y = y + b.data()[j];
            }
            *o = y;
        }
    }
    Tensor::from_vec(&[n, d], out)
}

/// Gradients of [`layer_norm`]: returns (grad_x, grad_gamma, grad_beta);
/// the affine gradients are `None` when the layer has no affine.
pub fn layer_norm_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: Option<&Tensor<T>>,
    eps: T,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Option<Tensor<T>>, Option<Tensor<T>>) {
    let (n, d) = (x.rows(), x.cols());
    let dn = T::from_f64(d as f64);
    let mut gx = vec![T::zero(); n * d];
    let mut ggamma = vec![T::zero(); d];
    let mut gbeta = vec![T::zero(); d];
    for i in 0..n {
        let row = x.row(i);
        let grow = grad_out.row(i);
        let mean = row.iter().fold(T::zero(), |a, &v| a + v) / dn;
        let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / dn;
        let inv = (var + eps).sqrt().recip();
        // xhat and the gradient flowing into it
        let mut sum_gh = T::zero();
        let mut sum_gh_xhat = T::zero();
        for j in 0..d {
            let xhat = (row[j] - mean) * inv;
            let gh = match gamma {
                Some(g) => grow[j] * g.data()[j],
                None => grow[j],
            };
            ggamma[j] += grow[j] * xhat;
            gbeta[j] += grow[j];
            sum_gh += gh;
            sum_gh_xhat += gh * xhat;
        }
        let m1 = sum_gh / dn;
        let m2 = sum_gh_xhat / dn;
        let dst = &mut gx[i * d..(i + 1) * d];
        for (j, o) in dst.iter_mut().enumerate() {
            let xhat = (row[j] - mean) * inv;
            let gh = match gamma {
                Some(g) => grow[j] * g.data()[j],
                None => grow[j],
            };
            *o = inv * (gh - m1 - xhat * m2);
        }
    }
    let ggamma = gamma.map(|_| Tensor::from_vec(&[d], ggamma));
    let gbeta = gamma.map(|_| Tensor::from_vec(&[d], gbeta));
    (Tensor::from_vec(&[n, d], gx), ggamma, gbeta)
}

/// Instance norm for a single sequence `[n×d]`: each channel (column) is
/// normalized over the time axis. No learned affine, biased variance.
pub fn instance_norm<T: Scalar>(x: &Tensor<T>, eps: T) -> Tensor<T> {
    let (n, d) = (x.rows(), x.cols());
    let nn = T::from_f64(n as f64);
    let xd = x.data();
    let mut mean = vec![T::zero(); d];
    let mut var = vec![T::zero(); d];
    for i in 0..n {
        for j in 0..d {
            mean[j] += xd[i * d + j];
        }
    }
    for m in mean.iter_mut() {
        *m /= nn;
    }
    for i in 0..n {
        for j in 0..d {
            let c = xd[i * d + j] - mean[j];
            var[j] += c * c;
        }
    }
    for v in var.iter_mut() {
        *v /= nn;
    }
    let inv: Vec<T> = var.iter().map(|&v| (v + eps).sqrt().recip()).collect();
    let mut out = vec![T::zero(); n * d];
    for i in 0..n {
        for j in 0..d {
            out[i * d + j] = (xd[i * d + j] - mean[j]) * inv[j];
        }
    }
    Tensor::from_vec(&[n, d], out)
}

pub fn instance_norm_backward<T: Scalar>(
    x: &Tensor<T>,
    eps: T,
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let (n, d) = (x.rows(), x.cols());
    let nn = T::from_f64(n as f64);
    let xd = x.data();
    let gd = grad_out.data();
    let mut gx = vec![T::zero(); n * d];
    for j in 0..d {
        let mut mean = T::zero();
        for i in 0..n {
            mean += xd[i * d + j];
        }
        mean /= nn;
        let mut var = T::zero();
        for i in 0..n {
            let c = xd[i * d + j] - mean;
            var += c * c;
        }
        var /= nn;
        let inv = (var + eps).sqrt().recip();
        let mut sum_g = T::zero();
        let mut sum_g_xhat = T::zero();
        for i in 0..n {
            let xhat = (xd[i * d + j] - mean) * inv;
            sum_g += gd[i * d + j];
            sum_g_xhat += gd[i * d + j] * xhat;
        }
        let m1 = sum_g / nn;
        let m2 = sum_g_xhat / nn;
        for i in 0..n {
            let xhat = (xd[i * d + j] - mean) * inv;
            gx[i * d + j] = inv * (gd[i * d + j] - m1 - xhat * m2);
        }
    }
    Tensor::from_vec(&[n, d], gx)
}

/// Gather rows of `table` (`[v×d]`) at `ids`, producing `[n×d]`.
pub fn embedding_lookup<T: Scalar>(table: &Tensor<T>, ids: &[usize]) -> Tensor<T> {
    let (v, d) = (table.rows(), table.cols());
    let mut out = vec![T::zero(); ids.len() * d];
    for (i, &id) in ids.iter().enumerate() {
        assert!(id < v, "embedding id {id} out of range (vocab {v})");
        out[i * d..(i + 1) * d].copy_from_slice(table.row(id));
    }
    Tensor::from_vec(&[ids.len(), d], out)
}

/// Scatter-add of the upstream gradient back into the table gradient.
pub fn embedding_lookup_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    ids: &[usize],
    vocab: usize,
) -> Tensor<T> {
    let d = grad_out.cols();
    assert_eq!(grad_out.rows(), ids.len());
    let mut gt = vec![T::zero(); vocab * d];
    for (i, &id) in ids.iter().enumerate() {
        let src = grad_out.row(i);
        let dst = &mut gt[id * d..(id + 1) * d];
        for (o, &g) in dst.iter_mut().zip(src) {
            *o += g;
        }
    }
    Tensor::from_vec(&[vocab, d], gt)
}

/// Mean negative log-likelihood of integer targets under row logits,
/// computed through a stable log-softmax.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> T {
    let (n, v) = (logits.rows(), logits.cols());
    assert_eq!(n, targets.len(), "cross_entropy target count mismatch");
    let mut scratch = vec![T::zero(); v];
    let mut total = T::zero();
    for (i, &t) in targets.iter().enumerate() {
        assert!(t < v, "cross_entropy target {t} out of range");
        log_softmax_row(logits.row(i), &mut scratch);
        total -= scratch[t];
    }
    total / T::from_f64(n as f64)
}

/// Gradient of [`cross_entropy`] w.r.t. the logits: `(softmax − onehot)/n`.
pub fn cross_entropy_backward<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> Tensor<T> {
    let (n, v) = (logits.rows(), logits.cols());
    let inv_n = T::from_f64(n as f64).recip();
    let mut gx = vec![T::zero(); n * v];
    for (i, &t) in targets.iter().enumerate() {
        softmax_row(logits.row(i), &mut gx[i * v..(i + 1) * v]);
        let dst = &mut gx[i * v..(i + 1) * v];
        dst[t] -= T::one();
        for o in dst.iter_mut() {
            *o *= inv_n;
        }
    }
    Tensor::from_vec(&[n, v], gx)
}
