//! The shared student/teacher architecture: convolutional downsampler,
//! convolutional positional encoding, and post-norm transformer blocks with
//! pre-residual FFN taps.

mod frontend;
mod layers;

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::params::{join, Parameterized};
use crate::tensor::{Scalar, Tensor};

pub use frontend::{ConvFrontend, PosConv, PosConvCache};
pub use layers::{
    Block, BlockCache, BlockDropout, BlockOut, LayerNorm, Linear, MultiHeadAttention, LN_EPS,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// (kernel, stride) per frontend conv stage.
    pub conv_spec: Vec<(usize, usize)>,
    pub conv_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    /// Residual-path dropout (attention output, FFN output, encoder input).
    pub dropout: f64,
    pub attn_dropout: f64,
    /// Dropout on the FFN activation.
    pub ffn_dropout: f64,
    pub layer_drop_prob: f64,
    pub pos_conv_layers: usize,
    pub pos_conv_total_kernel: usize,
    pub pos_conv_groups: usize,
    pub qkv_bias: bool,
}

impl EncoderConfig {
    /// Full-scale configuration (768-dim, 12 layers, seven-conv frontend).
    pub fn paper() -> Self {
        EncoderConfig {
            conv_spec: vec![(10, 5), (3, 2), (3, 2), (3, 2), (3, 2), (2, 2), (2, 2)],
            conv_dim: 512,
            hidden_dim: 768,
            num_layers: 12,
            num_heads: 12,
            ffn_dim: 3072,
            dropout: 0.1,
            attn_dropout: 0.1,
            ffn_dropout: 0.0,
            layer_drop_prob: 0.05,
            pos_conv_layers: 5,
            pos_conv_total_kernel: 95,
            pos_conv_groups: 16,
            qkv_bias: false,
        }
    }

    /// Desk-scale configuration: 4 layers, 32 dims, 4 heads, and a
    /// four-conv frontend that still lands on 50 Hz frames at 16 kHz input
    /// (strides 5·4·4·4 = 320).
    pub fn desk() -> Self {
        EncoderConfig {
            conv_spec: vec![(10, 5), (8, 4), (4, 4), (4, 4)],
            conv_dim: 32,
            hidden_dim: 32,
            num_layers: 4,
            num_heads: 4,
            ffn_dim: 128,
            dropout: 0.1,
            attn_dropout: 0.1,
            ffn_dropout: 0.0,
            layer_drop_prob: 0.0,
            pos_conv_layers: 5,
            pos_conv_total_kernel: 95,
            pos_conv_groups: 16,
            qkv_bias: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        use crate::error::CoreError;
        if self.hidden_dim % self.num_heads != 0 {
            return Err(CoreError::InvalidArgument(format!(
                "hidden dim {} not divisible by {} heads",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.hidden_dim % self.pos_conv_groups != 0 {
            return Err(CoreError::InvalidArgument(format!(
                "hidden dim {} not divisible by {} pos conv groups",
                self.hidden_dim, self.pos_conv_groups
            )));
        }
        if self.pos_conv_total_kernel % self.pos_conv_layers != 0 {
            return Err(CoreError::InvalidArgument(
                "pos conv total kernel must split evenly across layers".into(),
            ));
        }
        if self.conv_spec.is_empty() {
            return Err(CoreError::InvalidArgument("empty conv spec".into()));
        }
        Ok(())
    }

    /// Overall frame rate divisor (product of strides).
    pub fn downsample_factor(&self) -> usize {
        self.conv_spec.iter().map(|&(_, s)| s).product()
    }
}

/// Captured activations from one encoder forward pass. Taps are the FFN
/// outputs before the final residual add and layer norm; block outputs are
/// the full post-norm block results. Layer indices are 1-based.
pub struct EncoderTaps<T> {
    pub taps: BTreeMap<usize, Tensor<T>>,
    pub block_outputs: BTreeMap<usize, Tensor<T>>,
    pub final_output: Tensor<T>,
}

pub struct EncodeCache<T> {
    pos: PosConvCache<T>,
    /// frames + positional features (input of the encoder-level layer norm).
    pre_ln_in: Tensor<T>,
    input_dropout: Option<Vec<T>>,
    /// Per block: `None` when the block was skipped by layer drop.
    blocks: Vec<Option<BlockCache<T>>>,
}

/// Frontend + positional encoding + transformer blocks. Both the student
/// and the teacher are instances of this type.
pub struct EncoderStack<T> {
    pub config: EncoderConfig,
    pub frontend: ConvFrontend<T>,
    pub pos_conv: PosConv<T>,
    pub pre_ln: LayerNorm<T>,
    pub blocks: Vec<Block<T>>,
}

impl<T: Scalar> EncoderStack<T> {
    pub fn new<R: Rng>(config: &EncoderConfig, rng: &mut R) -> Self {
        config.validate().expect("invalid encoder config");
        let frontend =
            ConvFrontend::new(&config.conv_spec, config.conv_dim, config.hidden_dim, rng);
        let pos_conv = PosConv::new(
            config.hidden_dim,
            config.pos_conv_layers,
            config.pos_conv_total_kernel,
            config.pos_conv_groups,
            rng,
        );
        let pre_ln = LayerNorm::new(config.hidden_dim, true);
        let blocks = (0..config.num_layers)
            .map(|_| {
                Block::new(
                    config.hidden_dim,
                    config.num_heads,
                    config.ffn_dim,
                    config.qkv_bias,
                    rng,
                )
            })
            .collect();
        EncoderStack {
            config: config.clone(),
            frontend,
            pos_conv,
            pre_ln,
            blocks,
        }
    }

    /// Waveform (16 kHz) → frames `[n×d]` at the downsampled rate.
    pub fn downsample(&self, waveform: &[T]) -> Result<(Tensor<T>, frontend::FrontendCache<T>)> {
        self.frontend.forward(waveform)
    }

    pub fn frontend_backward(&mut self, cache: &frontend::FrontendCache<T>, grad: &Tensor<T>) {
        self.frontend.backward(cache, grad);
    }

    /// Positional encoding only (shape preserved); exposed for tests.
    pub fn positional_encode(&self, frames: &Tensor<T>) -> Tensor<T> {
        self.pos_conv.forward(frames).0
    }

    /// Run the transformer over `frames`, capturing taps at `capture_taps`
    /// and full block outputs at `capture_outputs` (1-based layer indices).
    /// Layer drop and dropout apply only in train mode.
    pub fn encode<R: Rng>(
        &self,
        frames: &Tensor<T>,
        capture_taps: &[usize],
        capture_outputs: &[usize],
        train: bool,
        rng: &mut R,
    ) -> (EncoderTaps<T>, EncodeCache<T>) {
        self.encode_inner(frames, capture_taps, capture_outputs, train, false, rng)
    }

    /// Causal-mask variant used by the unit language model.
    pub fn encode_causal<R: Rng>(
        &self,
        frames: &Tensor<T>,
        train: bool,
        rng: &mut R,
    ) -> (EncoderTaps<T>, EncodeCache<T>) {
        self.encode_inner(frames, &[], &[], train, true, rng)
    }

    fn encode_inner<R: Rng>(
        &self,
        frames: &Tensor<T>,
        capture_taps: &[usize],
        capture_outputs: &[usize],
        train: bool,
        causal: bool,
        rng: &mut R,
    ) -> (EncoderTaps<T>, EncodeCache<T>) {
        let l = self.blocks.len();
        assert!(
            capture_taps.iter().chain(capture_outputs).all(|&k| k >= 1 && k <= l),
            "capture set must lie in 1..={l}"
        );
        let (with_pos, pos_cache) = self.pos_conv.forward(frames);
        let pre_ln_in = with_pos;
        let mut x = self.pre_ln.forward(&pre_ln_in);
        let input_dropout =
            layers::dropout_mask::<T, R>(x.len(), self.config.dropout, train, rng);
        layers::apply_dropout(&mut x, &input_dropout);

        let drop = BlockDropout {
            residual: self.config.dropout,
            attn: self.config.attn_dropout,
            activation: self.config.ffn_dropout,
        };
        let mut taps = BTreeMap::new();
        let mut block_outputs = BTreeMap::new();
        let mut caches: Vec<Option<BlockCache<T>>> = Vec::with_capacity(l);
        for (idx, block) in self.blocks.iter().enumerate() {
            let layer = idx + 1;
            if train && self.config.layer_drop_prob > 0.0 {
                let u: f64 = rng.gen();
                if u < self.config.layer_drop_prob {
                    caches.push(None);
                    continue;
                }
            }
            let (out, cache) = block.forward(&x, causal, drop, train, rng);
            if capture_taps.contains(&layer) {
                taps.insert(layer, out.tap.clone());
            }
            if capture_outputs.contains(&layer) {
                block_outputs.insert(layer, out.out.clone());
            }
            caches.push(Some(cache));
            x = out.out;
        }
        (
            EncoderTaps {
                taps,
                block_outputs,
                final_output: x,
            },
            EncodeCache {
                pos: pos_cache,
                pre_ln_in,
                input_dropout,
                blocks: caches,
            },
        )
    }

    /// Backward through [`EncoderStack::encode`]. `grad_final` is the
    /// gradient on the final output (may be `None`), `tap_grads` the
    /// gradients injected at captured taps. Returns the gradient w.r.t.
    /// the input frames. Tap gradients aimed at layer-dropped blocks are
    /// ignored (those taps never existed in the forward pass).
    pub fn encode_backward(
        &mut self,
        cache: &EncodeCache<T>,
        grad_final: Option<&Tensor<T>>,
        tap_grads: &BTreeMap<usize, Tensor<T>>,
        frames_shape: &[usize],
    ) -> Tensor<T> {
        let mut g = match grad_final {
            Some(g) => g.clone(),
            None => Tensor::zeros(frames_shape),
        };
        for (idx, block) in self.blocks.iter_mut().enumerate().rev() {
            let layer = idx + 1;
            match &cache.blocks[idx] {
                Some(bc) => {
                    let tap_grad = tap_grads.get(&layer);
                    g = block.backward(bc, &g, tap_grad);
                }
                None => {
                    // layer-dropped block: identity
                }
            }
        }
        let g = layers::dropout_backward(&g, &cache.input_dropout);
        let g = self.pre_ln.backward(&cache.pre_ln_in, &g);
        self.pos_conv.backward(&cache.pos, &g)
    }

    /// The residual stream entering block `layer`'s FFN (`h`), from a cached
    /// forward pass. Used to verify the tap-point identity.
    pub fn cached_post_attn(&self, cache: &EncodeCache<T>, layer: usize) -> Option<Tensor<T>> {
        cache.blocks[layer - 1]
            .as_ref()
            .map(|bc| bc.post_attn.clone())
    }
}

impl<T: Scalar> Parameterized<T> for EncoderStack<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.frontend.visit(&join(prefix, "frontend"), f);
        self.pos_conv.visit(&join(prefix, "pos_conv"), f);
        self.pre_ln.visit(&join(prefix, "pre_ln"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("block{i}")), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.frontend.visit_mut(&join(prefix, "frontend"), f);
        self.pos_conv.visit_mut(&join(prefix, "pos_conv"), f);
        self.pre_ln.visit_mut(&join(prefix, "pre_ln"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("block{i}")), f);
        }
    }
    fn visit_pair(
        &self,
        other: &mut Self,
        prefix: &str,
        f: &mut dyn FnMut(&str, &Tensor<T>, &mut Tensor<T>),
    ) {
        assert_eq!(
            self.blocks.len(),
            other.blocks.len(),
            "encoder depth mismatch"
        );
        self.frontend
            .visit_pair(&mut other.frontend, &join(prefix, "frontend"), f);
        self.pos_conv
            .visit_pair(&mut other.pos_conv, &join(prefix, "pos_conv"), f);
        self.pre_ln
            .visit_pair(&mut other.pre_ln, &join(prefix, "pre_ln"), f);
        for (i, (a, b)) in self.blocks.iter().zip(other.blocks.iter_mut()).enumerate() {
            a.visit_pair(b, &join(prefix, &format!("block{i}")), f);
        }
    }
}
