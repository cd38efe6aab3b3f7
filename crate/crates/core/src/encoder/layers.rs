//! Transformer building blocks with hand-written backward passes: linear,
//! layer norm, multi-head attention, and the post-norm encoder block with a
//! pre-residual FFN tap.

use rand::Rng;

use crate::ops;
use crate::params::{join, Parameterized};
use crate::tensor::{Scalar, Tensor};

pub const LN_EPS: f64 = 1e-5;

/// `y = x·Wᵀ + b`, weight `[out×in]`.
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng>(in_dim: usize, out_dim: usize, bias: bool, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Linear {
            weight: Tensor::rand_uniform(&[out_dim, in_dim], bound, rng).with_grad(),
            bias: bias.then(|| Tensor::zeros(&[out_dim]).with_grad()),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut y = ops::matmul_nt(x, &self.weight);
        if let Some(b) = &self.bias {
            let bd = b.data();
            for i in 0..y.rows() {
                for (v, &bv) in y.row_mut(i).iter_mut().zip(bd) {
                    *v += bv;
                }
            }
        }
        y
    }

    /// Accumulates weight/bias grads, returns grad w.r.t. the input.
    pub fn backward(&mut self, x: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
        let gw = ops::matmul_tn(grad_out, x);
        self.weight.add_to_grad(gw.data());
        if let Some(b) = &mut self.bias {
            let mut gb = vec![T::zero(); grad_out.cols()];
            for i in 0..grad_out.rows() {
                for (g, &v) in gb.iter_mut().zip(grad_out.row(i)) {
                    *g += v;
                }
            }
            b.add_to_grad(&gb);
        }
        ops::matmul(grad_out, &self.weight)
    }
}

impl<T: Scalar> Parameterized<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
    fn visit_pair(
        &self,
        other: &mut Self,
        prefix: &str,
        f: &mut dyn FnMut(&str, &Tensor<T>, &mut Tensor<T>),
    ) {
        f(&join(prefix, "weight"), &self.weight, &mut other.weight);
        match (&self.bias, &mut other.bias) {
            (Some(a), Some(b)) => f(&join(prefix, "bias"), a, b),
            (None, None) => {}
            _ => panic!("linear bias presence mismatch at {prefix}"),
        }
    }
}

/// Layer norm over the channel axis, optionally affine.
pub struct LayerNorm<T> {
    pub gamma: Option<Tensor<T>>,
    pub beta: Option<Tensor<T>>,
    pub eps: T,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(dim: usize, affine: bool) -> Self {
        LayerNorm {
            gamma: affine.then(|| Tensor::full(&[dim], T::one()).with_grad()),
            beta: affine.then(|| Tensor::zeros(&[dim]).with_grad()),
            eps: T::from_f64(LN_EPS),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        ops::layer_norm(x, self.gamma.as_ref(), self.beta.as_ref(), self.eps)
    }

    pub fn backward(&mut self, x: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
        let (gx, ggamma, gbeta) =
            ops::layer_norm_backward(x, self.gamma.as_ref(), self.eps, grad_out);
        if let (Some(g), Some(gg)) = (&mut self.gamma, ggamma) {
            g.add_to_grad(gg.data());
        }
        if let (Some(b), Some(gb)) = (&mut self.beta, gbeta) {
            b.add_to_grad(gb.data());
        }
        gx
    }
}

impl<T: Scalar> Parameterized<T> for LayerNorm<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        if let Some(g) = &self.gamma {
            f(&join(prefix, "gamma"), g);
        }
        if let Some(b) = &self.beta {
            f(&join(prefix, "beta"), b);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        if let Some(g) = &mut self.gamma {
            f(&join(prefix, "gamma"), g);
        }
        if let Some(b) = &mut self.beta {
            f(&join(prefix, "beta"), b);
        }
    }
    fn visit_pair(
        &self,
        other: &mut Self,
        prefix: &str,
        f: &mut dyn FnMut(&str, &Tensor<T>, &mut Tensor<T>),
    ) {
        match (&self.gamma, &mut other.gamma) {
            (Some(a), Some(b)) => f(&join(prefix, "gamma"), a, b),
            (None, None) => {}
            _ => panic!("layer norm affine mismatch at {prefix}"),
        }
        match (&self.beta, &mut other.beta) {
            (Some(a), Some(b)) => f(&join(prefix, "beta"), a, b),
            (None, None) => {}
            _ => panic!("layer norm affine mismatch at {prefix}"),
        }
    }
}

/// Inverted-dropout mask: entries are 0 or 1/(1−p). `None` when p = 0 or at
/// eval time.
pub(crate) fn dropout_mask<T: Scalar, R: Rng>(
    len: usize,
    p: f64,
    train: bool,
    rng: &mut R,
) -> Option<Vec<T>> {
    if !train || p <= 0.0 {
        return None;
    }
    let keep = T::from_f64(1.0 / (1.0 - p));
    Some(
        (0..len)
            .map(|_| {
                if rng.gen::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect(),
    )
}

pub(crate) fn apply_dropout<T: Scalar>(x: &mut Tensor<T>, mask: &Option<Vec<T>>) {
    if let Some(m) = mask {
        for (v, &s) in x.data_mut().iter_mut().zip(m) {
            *v *= s;
        }
    }
}

pub(crate) fn dropout_backward<T: Scalar>(grad: &Tensor<T>, mask: &Option<Vec<T>>) -> Tensor<T> {
    match mask {
        None => grad.clone(),
        Some(m) => {
            let data = grad.iter().zip(m).map(|(&g, &s)| g * s).collect();
            Tensor::from_vec(grad.shape(), data)
        }
    }
}

/// Multi-head self-attention. QKV biases are configurable (removed in the
/// default config); the output projection always has a bias.
pub struct MultiHeadAttention<T> {
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub out: Linear<T>,
    pub num_heads: usize,
}

pub struct AttentionCache<T> {
    x: Tensor<T>,
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    /// Post-softmax attention probabilities, one `[n×n]` tensor per head.
    probs: Vec<Tensor<T>>,
    attn_dropout: Vec<Option<Vec<T>>>,
    ctx: Tensor<T>,
    causal: bool,
}

impl<T: Scalar> MultiHeadAttention<T> {
    pub fn new<R: Rng>(dim: usize, num_heads: usize, qkv_bias: bool, rng: &mut R) -> Self {
        assert_eq!(dim % num_heads, 0, "hidden dim must divide into heads");
        MultiHeadAttention {
            q: Linear::new(dim, dim, qkv_bias, rng),
            k: Linear::new(dim, dim, qkv_bias, rng),
            v: Linear::new(dim, dim, qkv_bias, rng),
            out: Linear::new(dim, dim, true, rng),
            num_heads,
        }
    }

    pub fn forward<R: Rng>(
        &self,
        x: &Tensor<T>,
        causal: bool,
        attn_dropout: f64,
        train: bool,
        rng: &mut R,
    ) -> (Tensor<T>, AttentionCache<T>) {
        let n = x.rows();
        let d = x.cols();
        let h = self.num_heads;
        let hd = d / h;
        let scale = T::from_f64(1.0 / (hd as f64).sqrt());
        let q = self.q.forward(x);
        let k = self.k.forward(x);
        let v = self.v.forward(x);
        let mut probs = Vec::with_capacity(h);
        let mut masks = Vec::with_capacity(h);
        let mut ctx = Tensor::zeros(&[n, d]);
        for head in 0..h {
            let qh = head_slice(&q, head, hd);
            let kh = head_slice(&k, head, hd);
            let vh = head_slice(&v, head, hd);
            let mut scores = ops::matmul_nt(&qh, &kh);
            for s in scores.data_mut().iter_mut() {
                *s *= scale;
            }
            if causal {
                for i in 0..n {
                    for s in scores.row_mut(i).iter_mut().skip(i + 1) {
                        *s = T::neg_infinity();
                    }
                }
            }
            let p = ops::softmax(&scores);
            let mask = dropout_mask::<T, R>(n * n, attn_dropout, train, rng);
            let mut pd = p.clone();
            apply_dropout(&mut pd, &mask);
            let ctx_h = ops::matmul(&pd, &vh);
            write_head(&mut ctx, &ctx_h, head, hd);
            probs.push(p);
            masks.push(mask);
        }
        let out = self.out.forward(&ctx);
        (
            out,
            AttentionCache {
                x: x.clone(),
                q,
                k,
                v,
                probs,
                attn_dropout: masks,
                ctx,
                causal,
            },
        )
    }

    pub fn backward(&mut self, cache: &AttentionCache<T>, grad_out: &Tensor<T>) -> Tensor<T> {
        let n = cache.x.rows();
        let d = cache.x.cols();
        let h = self.num_heads;
        let hd = d / h;
        let scale = T::from_f64(1.0 / (hd as f64).sqrt());
        let gctx = self.out.backward(&cache.ctx, grad_out);
        let mut gq = Tensor::zeros(&[n, d]);
        let mut gk = Tensor::zeros(&[n, d]);
        let mut gv = Tensor::zeros(&[n, d]);
        for head in 0..h {
            let gctx_h = head_slice(&gctx, head, hd);
            let vh = head_slice(&cache.v, head, hd);
            let qh = head_slice(&cache.q, head, hd);
            let kh = head_slice(&cache.k, head, hd);
            let p = &cache.probs[head];
            let mut pd = p.clone();
            apply_dropout(&mut pd, &cache.attn_dropout[head]);
            // ctx_h = pd·vh
            let gpd = ops::matmul_nt(&gctx_h, &vh);
            let gvh = ops::matmul_tn(&pd, &gctx_h);
            let gp = dropout_backward(&gpd, &cache.attn_dropout[head]);
            let gs = ops::softmax_backward(p, &gp);
            // scores = scale·qh·khᵀ (masked entries have p = 0, so gs = 0 there)
            let mut gqh = ops::matmul(&gs, &kh);
            for g in gqh.data_mut().iter_mut() {
                *g *= scale;
            }
            let mut gkh = ops::matmul_tn(&gs, &qh);
            for g in gkh.data_mut().iter_mut() {
                *g *= scale;
            }
            write_head(&mut gq, &gqh, head, hd);
            write_head(&mut gk, &gkh, head, hd);
            write_head(&mut gv, &gvh, head, hd);
        }
        let mut gx = self.q.backward(&cache.x, &gq);
        let gx_k = self.k.backward(&cache.x, &gk);
        let gx_v = self.v.backward(&cache.x, &gv);
        for ((a, &b), &c) in gx.data_mut().iter_mut().zip(gx_k.data()).zip(gx_v.data()) {
            *a += b + c;
        }
        let _ = cache.causal;
        gx
    }
}

fn head_slice<T: Scalar>(x: &Tensor<T>, head: usize, hd: usize) -> Tensor<T> {
    let n = x.rows();
    let mut out = vec![T::zero(); n * hd];
    for i in 0..n {
        out[i * hd..(i + 1) * hd].copy_from_slice(&x.row(i)[head * hd..(head + 1) * hd]);
    }
    Tensor::from_vec(&[n, hd], out)
}

fn write_head<T: Scalar>(dst: &mut Tensor<T>, src: &Tensor<T>, head: usize, hd: usize) {
    let n = src.rows();
    for i in 0..n {
        dst.row_mut(i)[head * hd..(head + 1) * hd].copy_from_slice(src.row(i));
    }
}

impl<T: Scalar> Parameterized<T> for MultiHeadAttention<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.q.visit(&join(prefix, "q"), f);
        self.k.visit(&join(prefix, "k"), f);
        self.v.visit(&join(prefix, "v"), f);
        self.out.visit(&join(prefix, "out"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.q.visit_mut(&join(prefix, "q"), f);
        self.k.visit_mut(&join(prefix, "k"), f);
        self.v.visit_mut(&join(prefix, "v"), f);
        self.out.visit_mut(&join(prefix, "out"), f);
    }
    fn visit_pair(
        &self,
        other: &mut Self,
        prefix: &str,
        f: &mut dyn FnMut(&str, &Tensor<T>, &mut Tensor<T>),
    ) {
        self.q.visit_pair(&mut other.q, &join(prefix, "q"), f);
        self.k.visit_pair(&mut other.k, &join(prefix, "k"), f);
        self.v.visit_pair(&mut other.v, &join(prefix, "v"), f);
        self.out.visit_pair(&mut other.out, &join(prefix, "out"), f);
    }
}

/// Post-norm transformer block. Dropout placement follows the standard
/// post-norm wiring: on attention output, on the FFN activation, and on the
/// FFN output, each before its residual add.
pub struct Block<T> {
    pub attn: MultiHeadAttention<T>,
    pub ln1: LayerNorm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
    pub ln2: LayerNorm<T>,
}

pub struct BlockOut<T> {
    pub out: Tensor<T>,
    /// FFN output before the final residual add and layer norm (the tap).
    pub tap: Tensor<T>,
}

pub struct BlockCache<T> {
    attn: AttentionCache<T>,
    attn_dropout_mask: Option<Vec<T>>,
    /// x + dropped attention output (input of ln1).
    pre_ln1: Tensor<T>,
    /// ln1 output: the residual stream entering the FFN (`h`).
    pub(crate) post_attn: Tensor<T>,
    fc1_out: Tensor<T>,
    act_dropout_mask: Option<Vec<T>>,
    act_dropped: Tensor<T>,
    tap_dropout_mask: Option<Vec<T>>,
    /// h + dropped tap (input of ln2).
    pre_ln2: Tensor<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct BlockDropout {
    pub residual: f64,
    pub attn: f64,
    pub activation: f64,
}

impl<T: Scalar> Block<T> {
    pub fn new<R: Rng>(
        dim: usize,
        num_heads: usize,
        ffn_dim: usize,
        qkv_bias: bool,
        rng: &mut R,
    ) -> Self {
        Block {
            attn: MultiHeadAttention::new(dim, num_heads, qkv_bias, rng),
            ln1: LayerNorm::new(dim, true),
            fc1: Linear::new(dim, ffn_dim, true, rng),
            fc2: Linear::new(ffn_dim, dim, true, rng),
            ln2: LayerNorm::new(dim, true),
        }
    }

    pub fn forward<R: Rng>(
        &self,
        x: &Tensor<T>,
        causal: bool,
        drop: BlockDropout,
        train: bool,
        rng: &mut R,
    ) -> (BlockOut<T>, BlockCache<T>) {
        let (attn_out, attn_cache) = self.attn.forward(x, causal, drop.attn, train, rng);
        let attn_mask = dropout_mask::<T, R>(attn_out.len(), drop.residual, train, rng);
        let mut attn_dropped = attn_out;
        apply_dropout(&mut attn_dropped, &attn_mask);
        let pre_ln1 = ops::add(x, &attn_dropped);
        let h = self.ln1.forward(&pre_ln1);

        let fc1_out = self.fc1.forward(&h);
        let act = ops::gelu(&fc1_out);
        let act_mask = dropout_mask::<T, R>(act.len(), drop.activation, train, rng);
        let mut act_dropped = act.clone();
        apply_dropout(&mut act_dropped, &act_mask);
        let tap = self.fc2.forward(&act_dropped);
        let tap_mask = dropout_mask::<T, R>(tap.len(), drop.residual, train, rng);
        let mut tap_dropped = tap.clone();
        apply_dropout(&mut tap_dropped, &tap_mask);
        let pre_ln2 = ops::add(&h, &tap_dropped);
        let out = self.ln2.forward(&pre_ln2);

        (
            BlockOut {
                out,
                tap: tap.clone(),
            },
            BlockCache {
                attn: attn_cache,
                attn_dropout_mask: attn_mask,
                pre_ln1,
                post_attn: h,
                fc1_out,
                act_dropout_mask: act_mask,
                act_dropped,
                tap_dropout_mask: tap_mask,
                pre_ln2,
            },
        )
    }

    /// Backward through the block. `tap_grad`, when present, is the
    /// gradient injected directly at the tap (from a prediction head).
    pub fn backward(
        &mut self,
        cache: &BlockCache<T>,
        grad_out: &Tensor<T>,
        tap_grad: Option<&Tensor<T>>,
    ) -> Tensor<T> {
        let g_pre_ln2 = self.ln2.backward(&cache.pre_ln2, grad_out);
        let mut gh = g_pre_ln2.clone();
        let g_tap_dropped = g_pre_ln2;
        let mut g_tap = dropout_backward(&g_tap_dropped, &cache.tap_dropout_mask);
        if let Some(tg) = tap_grad {
            assert_eq!(tg.shape(), g_tap.shape(), "tap gradient shape mismatch");
            for (a, &b) in g_tap.data_mut().iter_mut().zip(tg.data()) {
                *a += b;
            }
        }
        let g_act_dropped = self.fc2.backward(&cache.act_dropped, &g_tap);
        let g_act = dropout_backward(&g_act_dropped, &cache.act_dropout_mask);
        let g_fc1 = ops::gelu_backward(&cache.fc1_out, &g_act);
        let gh_ffn = self.fc1.backward(&cache.post_attn, &g_fc1);
        for (a, &b) in gh.data_mut().iter_mut().zip(gh_ffn.data()) {
            *a += b;
        }
        let g_pre_ln1 = self.ln1.backward(&cache.pre_ln1, &gh);
        let mut gx = g_pre_ln1.clone();
        let g_attn = dropout_backward(&g_pre_ln1, &cache.attn_dropout_mask);
        let gx_attn = self.attn.backward(&cache.attn, &g_attn);
        for (a, &b) in gx.data_mut().iter_mut().zip(gx_attn.data()) {
            *a += b;
        }
        gx
    }
}

impl<T: Scalar> Parameterized<T> for Block<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.attn.visit(&join(prefix, "attn"), f);
        self.ln1.visit(&join(prefix, "ln1"), f);
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
        self.ln2.visit(&join(prefix, "ln2"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.ln1.visit_mut(&join(prefix, "ln1"), f);
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
        self.ln2.visit_mut(&join(prefix, "ln2"), f);
    }
    fn visit_pair(
        &self,
        other: &mut Self,
        prefix: &str,
        f: &mut dyn FnMut(&str, &Tensor<T>, &mut Tensor<T>),
    ) {
        self.attn.visit_pair(&mut other.attn, &join(prefix, "attn"), f);
        self.ln1.visit_pair(&mut other.ln1, &join(prefix, "ln1"), f);
        self.fc1.visit_pair(&mut other.fc1, &join(prefix, "fc1"), f);
        self.fc2.visit_pair(&mut other.fc2, &join(prefix, "fc2"), f);
        self.ln2.visit_pair(&mut other.ln2, &join(prefix, "ln2"), f);
    }
}
