//! Convolutional waveform downsampler and the grouped-convolution
//! positional encoder.

use rand::Rng;

use crate::error::{CoreError, Result};
use crate::ops;
use crate::params::{join, Parameterized};
use crate::tensor::{Scalar, Tensor};

use super::layers::LayerNorm;

/// One frontend stage: strided conv (no bias) → layer norm over channels
/// → GELU.
pub struct ConvStage<T> {
    pub weight: Tensor<T>, // [c_out, k, c_in]
    pub ln: LayerNorm<T>,
    pub kernel: usize,
    pub stride: usize,
}

struct ConvStageCache<T> {
    input: Tensor<T>,
    conv_out: Tensor<T>,
    ln_out: Tensor<T>,
}

impl<T: Scalar> ConvStage<T> {
    fn new<R: Rng>(c_in: usize, c_out: usize, kernel: usize, stride: usize, rng: &mut R) -> Self {
        let bound = 1.0 / ((c_in * kernel) as f64).sqrt();
        ConvStage {
            weight: Tensor::rand_uniform(&[c_out, kernel, c_in], bound, rng).with_grad(),
            ln: LayerNorm::new(c_out, true),
            kernel,
            stride,
        }
    }

    fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, ConvStageCache<T>) {
        let conv_out = ops::conv1d(x, &self.weight, None, self.stride, 0, 1);
        let ln_out = self.ln.forward(&conv_out);
        let out = ops::gelu(&ln_out);
        (
            out,
            ConvStageCache {
                input: x.clone(),
                conv_out,
                ln_out,
            },
        )
    }

    fn backward(&mut self, cache: &ConvStageCache<T>, grad_out: &Tensor<T>) -> Tensor<T> {
        let g_ln = ops::gelu_backward(&cache.ln_out, grad_out);
        let g_conv = self.ln.backward(&cache.conv_out, &g_ln);
        let (gx, gw, _) =
            ops::conv1d_backward(&cache.input, &self.weight, false, self.stride, 0, 1, &g_conv);
        self.weight.add_to_grad(gw.data());
        gx
    }
}

impl<T: Scalar> Parameterized<T> for ConvStage<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        self.ln.visit(&join(prefix, "ln"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        self.ln.visit_mut(&join(prefix, "ln"), f);
    }
    fn visit_pair(
        &self,
        other: &mut Self,
        prefix: &str,
        f: &mut dyn FnMut(&str, &Tensor<T>, &mut Tensor<T>),
    ) {
        f(&join(prefix, "weight"), &self.weight, &mut other.weight);
        self.ln.visit_pair(&mut other.ln, &join(prefix, "ln"), f);
    }
}

/// Waveform → frames: the conv stack, a layer norm over the extractor
/// output, and a linear projection to the model dimension.
pub struct ConvFrontend<T> {
    pub stages: Vec<ConvStage<T>>,
    pub ln: LayerNorm<T>,
    pub proj: super::layers::Linear<T>,
}

pub struct FrontendCache<T> {
    stage_caches: Vec<ConvStageCache<T>>,
    extractor_out: Tensor<T>,
    ln_out: Tensor<T>,
}

impl<T: Scalar> ConvFrontend<T> {
    pub fn new<R: Rng>(
        conv_spec: &[(usize, usize)],
        conv_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Self {
        let mut stages = Vec::with_capacity(conv_spec.len());
        let mut c_in = 1;
        for &(k, s) in conv_spec {
            stages.push(ConvStage::new(c_in, conv_dim, k, s, rng));
            c_in = conv_dim;
        }
        ConvFrontend {
            stages,
            ln: LayerNorm::new(conv_dim, true),
            proj: super::layers::Linear::new(conv_dim, hidden_dim, true, rng),
        }
    }

    /// Number of output frames for a waveform of `samples` samples, or an
    /// error if the input is shorter than the receptive field.
    pub fn out_len(&self, samples: usize) -> Result<usize> {
        let mut t = samples;
        for stage in &self.stages {
            if t < stage.kernel {
                return Err(CoreError::InputTooShort(format!(
                    "{samples} samples do not cover the frontend receptive field"
                )));
            }
            t = ops::conv1d_out_len(t, stage.kernel, stage.stride, 0);
        }
        Ok(t)
    }

    pub fn forward(&self, waveform: &[T]) -> Result<(Tensor<T>, FrontendCache<T>)> {
        self.out_len(waveform.len())?;
        let mut x = Tensor::from_vec(&[waveform.len(), 1], waveform.to_vec());
        let mut stage_caches = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let (y, cache) = stage.forward(&x);
            stage_caches.push(cache);
            x = y;
        }
        let extractor_out = x;
        let ln_out = self.ln.forward(&extractor_out);
        let frames = self.proj.forward(&ln_out);
        Ok((
            frames,
            FrontendCache {
                stage_caches,
                extractor_out,
                ln_out,
            },
        ))
    }

    /// Accumulates parameter grads; the waveform itself is not a parameter,
    /// so the input gradient is dropped.
    pub fn backward(&mut self, cache: &FrontendCache<T>, grad_frames: &Tensor<T>) {
        let g_ln = self.proj.backward(&cache.ln_out, grad_frames);
        let mut g = self.ln.backward(&cache.extractor_out, &g_ln);
        for (stage, sc) in self.stages.iter_mut().zip(&cache.stage_caches).rev() {
            g = stage.backward(sc, &g);
        }
    }
}

impl<T: Scalar> Parameterized<T> for ConvFrontend<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for (i, s) in self.stages.iter().enumerate() {
            s.visit(&join(prefix, &format!("conv{i}")), f);
        }
        self.ln.visit(&join(prefix, "ln"), f);
        self.proj.visit(&join(prefix, "proj"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_mut(&join(prefix, &format!("conv{i}")), f);
        }
        self.ln.visit_mut(&join(prefix, "ln"), f);
        self.proj.visit_mut(&join(prefix, "proj"), f);
    }
    fn visit_pair(
        &self,
        other: &mut Self,
        prefix: &str,
        f: &mut dyn FnMut(&str, &Tensor<T>, &mut Tensor<T>),
    ) {
        assert_eq!(self.stages.len(), other.stages.len(), "frontend depth mismatch");
        for (i, (a, b)) in self.stages.iter().zip(other.stages.iter_mut()).enumerate() {
            a.visit_pair(b, &join(prefix, &format!("conv{i}")), f);
        }
        self.ln.visit_pair(&mut other.ln, &join(prefix, "ln"), f);
        self.proj.visit_pair(&mut other.proj, &join(prefix, "proj"), f);
    }
}

/// One positional-encoding stage: grouped same-padded conv → layer norm
/// (no affine) → GELU.
pub struct PosConvStage<T> {
    pub weight: Tensor<T>, // [d, k, d/groups]
    pub bias: Tensor<T>,
    pub ln: LayerNorm<T>,
    pub kernel: usize,
    pub groups: usize,
}

struct PosConvStageCache<T> {
    input: Tensor<T>,
    conv_out: Tensor<T>,
    ln_out: Tensor<T>,
}

impl<T: Scalar> PosConvStage<T> {
    fn new<R: Rng>(dim: usize, kernel: usize, groups: usize, rng: &mut R) -> Self {
        assert_eq!(dim % groups, 0, "pos conv groups must divide dim");
        let c_in_g = dim / groups;
        let bound = 1.0 / ((c_in_g * kernel) as f64).sqrt();
        PosConvStage {
            weight: Tensor::rand_uniform(&[dim, kernel, c_in_g], bound, rng).with_grad(),
            bias: Tensor::zeros(&[dim]).with_grad(),
            ln: LayerNorm::new(dim, false),
            kernel,
            groups,
        }
    }

    fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, PosConvStageCache<T>) {
        let pad = self.kernel / 2;
        let conv_out = ops::conv1d(x, &self.weight, Some(&self.bias), 1, pad, self.groups);
        let ln_out = self.ln.forward(&conv_out);
        let out = ops::gelu(&ln_out);
        (
            out,
            PosConvStageCache {
                input: x.clone(),
                conv_out,
                ln_out,
            },
        )
    }

    fn backward(&mut self, cache: &PosConvStageCache<T>, grad_out: &Tensor<T>) -> Tensor<T> {
        let pad = self.kernel / 2;
        let g_ln = ops::gelu_backward(&cache.ln_out, grad_out);
        let g_conv = self.ln.backward(&cache.conv_out, &g_ln);
        let (gx, gw, gb) = ops::conv1d_backward(
            &cache.input,
            &self.weight,
            true,
            1,
            pad,
            self.groups,
            &g_conv,
        );
        self.weight.add_to_grad(gw.data());
        self.bias.add_to_grad(gb.expect("pos conv has a bias").data());
        gx
    }
}

impl<T: Scalar> Parameterized<T> for PosConvStage<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
        self.ln.visit(&join(prefix, "ln"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
        self.ln.visit_mut(&join(prefix, "ln"), f);
    }
    fn visit_pair(
        &self,
        other: &mut Self,
        prefix: &str,
        f: &mut dyn FnMut(&str, &Tensor<T>, &mut Tensor<T>),
    ) {
        f(&join(prefix, "weight"), &self.weight, &mut other.weight);
        f(&join(prefix, "bias"), &self.bias, &mut other.bias);
        self.ln.visit_pair(&mut other.ln, &join(prefix, "ln"), f);
    }
}

/// Stacked grouped-convolution positional encoding: the stack output is
/// added to the frames (shape preserved). With 5 stages and a total kernel
/// of 95, each stage uses kernel 95/5 = 19.
pub struct PosConv<T> {
    pub stages: Vec<PosConvStage<T>>,
}

pub struct PosConvCache<T> {
    stage_caches: Vec<PosConvStageCache<T>>,
}

impl<T: Scalar> PosConv<T> {
    pub fn new<R: Rng>(
        dim: usize,
        num_layers: usize,
        total_kernel: usize,
        groups: usize,
        rng: &mut R,
    ) -> Self {
        assert!(num_layers >= 1);
        assert_eq!(
            total_kernel % num_layers,
            0,
            "total pos kernel must split evenly across layers"
        );
        let kernel = total_kernel / num_layers;
        PosConv {
            stages: (0..num_layers)
                .map(|_| PosConvStage::new(dim, kernel, groups, rng))
                .collect(),
        }
    }

    /// Returns frames + positional features.
    pub fn forward(&self, frames: &Tensor<T>) -> (Tensor<T>, PosConvCache<T>) {
        assert!(frames.rows() >= 1, "positional encoding needs frames");
        let mut x = frames.clone();
        let mut stage_caches = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let (y, cache) = stage.forward(&x);
            stage_caches.push(cache);
            x = y;
        }
        let out = ops::add(frames, &x);
        (out, PosConvCache { stage_caches })
    }

    /// Returns the gradient w.r.t. the input frames (residual + conv path).
    pub fn backward(&mut self, cache: &PosConvCache<T>, grad_out: &Tensor<T>) -> Tensor<T> {
        let mut g = grad_out.clone();
        for (stage, sc) in self.stages.iter_mut().zip(&cache.stage_caches).rev() {
            g = stage.backward(sc, &g);
        }
        ops::add(grad_out, &g)
    }
}

impl<T: Scalar> Parameterized<T> for PosConv<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for (i, s) in self.stages.iter().enumerate() {
            s.visit(&join(prefix, &format!("{i}")), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_mut(&join(prefix, &format!("{i}")), f);
        }
    }
    fn visit_pair(
        &self,
        other: &mut Self,
        prefix: &str,
        f: &mut dyn FnMut(&str, &Tensor<T>, &mut Tensor<T>),
    ) {
        assert_eq!(self.stages.len(), other.stages.len(), "pos conv depth mismatch");
        for (i, (a, b)) in self.stages.iter().zip(other.stages.iter_mut()).enumerate() {
            a.visit_pair(b, &join(prefix, &format!("{i}")), f);
        }
    }
}
