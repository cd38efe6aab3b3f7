//! The training objective: teacher EMA with copied positional parameters,
//! per-layer codebooks with online EMA updates, per-layer prediction heads,
//! masked cross-entropy, perplexity monitoring, and the final-tap objective
//! variant used for the collapse comparison.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, EncoderStack, EncoderTaps, Linear};
use crate::error::{CoreError, Result};
use crate::masking::{apply_mask, apply_mask_backward, sample_mask, MaskParams, MaskSpec};
use crate::ops;
use crate::optim::{AdamW, AdamWParams};
use crate::params::{join, zero_grads, Parameterized};
use crate::tensor::{Scalar, Tensor};

pub const INSTANCE_NORM_EPS: f64 = 1e-5;
/// Probability floor inside the cross-entropy.
pub const LOG_FLOOR: f64 = 1e-9;

// ---------------------------------------------------------------------------
// Schedules
// ---------------------------------------------------------------------------

/// Teacher decay at step `t`: `β_t = 1 − (1−β₀)·exp(−t/T)`.
pub fn ema_decay(t: u64, beta0: f64, timescale: f64) -> f64 {
    1.0 - ema_decay_complement(t, beta0, timescale)
}

/// `1 − β_t`, kept separate because β_t itself saturates to 1.0 in f64
/// once (1−β₀)·exp(−t/T) drops below machine epsilon; the update uses the
/// complement directly so the teacher keeps moving (strict monotonicity of
/// β_t is equivalent to strict decrease of this value).
pub fn ema_decay_complement(t: u64, beta0: f64, timescale: f64) -> f64 {
    (1.0 - beta0) * (-(t as f64) / timescale).exp()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TeacherSchedule {
    /// Smooth exponential approach to 1 (the default schedule).
    Exponential { beta0: f64, timescale: f64 },
    /// Linear ramp then hold (baseline schedule for the ablation).
    WarmupConstant {
        beta_start: f64,
        beta_end: f64,
        ramp_steps: u64,
    },
}

impl TeacherSchedule {
    pub fn exponential_default() -> Self {
        TeacherSchedule::Exponential {
            beta0: 0.999,
            timescale: 10_000.0,
        }
    }

    /// Ramp 0.999 → 0.9999 over 30k steps, then hold.
    pub fn warmup_constant_default() -> Self {
        TeacherSchedule::WarmupConstant {
            beta_start: 0.999,
            beta_end: 0.9999,
            ramp_steps: 30_000,
        }
    }

    pub fn beta(&self, t: u64) -> f64 {
        1.0 - self.one_minus_beta(t)
    }

    pub fn one_minus_beta(&self, t: u64) -> f64 {
        match *self {
            TeacherSchedule::Exponential { beta0, timescale } => {
                ema_decay_complement(t, beta0, timescale)
            }
            TeacherSchedule::WarmupConstant {
                beta_start,
                beta_end,
                ramp_steps,
            } => {
                let frac = if ramp_steps == 0 {
                    1.0
                } else {
                    ((t as f64) / (ramp_steps as f64)).min(1.0)
                };
                1.0 - (beta_start + (beta_end - beta_start) * frac)
            }
        }
    }
}

/// Learning-rate schedule: linear warmup, constant hold, exponential decay;
/// continuous at both segment boundaries. Also carries the conv-freeze step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub lr_init: f64,
    pub lr_peak: f64,
    pub lr_final: f64,
    pub warmup_steps: u64,
    pub hold_until: u64,
    pub decay_until: u64,
    pub conv_freeze_step: u64,
    pub total_steps: u64,
}

impl TrainSchedule {
    /// 5e-6 → 5e-4 over 12k steps, hold to 200k, decay to 5e-6 at 400k;
    /// feature extractor frozen at 200k.
    pub fn paper() -> Self {
        TrainSchedule {
            lr_init: 5e-6,
            lr_peak: 5e-4,
            lr_final: 5e-6,
            warmup_steps: 12_000,
            hold_until: 200_000,
            decay_until: 400_000,
            conv_freeze_step: 200_000,
            total_steps: 400_000,
        }
    }

    /// Compressed 5k-step profile with the same shape.
    pub fn desk() -> Self {
        TrainSchedule {
            lr_init: 1e-5,
            lr_peak: 1e-3,
            lr_final: 1e-4,
            warmup_steps: 500,
            hold_until: 2_500,
            decay_until: 5_000,
            conv_freeze_step: 2_500,
            total_steps: 5_000,
        }
    }

    pub fn lr_at(&self, t: u64) -> f64 {
        if t <= self.warmup_steps {
            let frac = if self.warmup_steps == 0 {
                1.0
            } else {
                t as f64 / self.warmup_steps as f64
            };
            self.lr_init + (self.lr_peak - self.lr_init) * frac
        } else if t <= self.hold_until {
            self.lr_peak
        } else if t < self.decay_until {
            let span = (self.decay_until - self.hold_until) as f64;
            let frac = (t - self.hold_until) as f64 / span;
            self.lr_peak * (self.lr_final / self.lr_peak).powf(frac)
        } else {
            self.lr_final
        }
    }
}

// ---------------------------------------------------------------------------
// Codebooks
// ---------------------------------------------------------------------------

/// Per-layer codeword matrix with its EMA accumulators. The invariant
/// `C_v = s_v / n_v` holds after every update; `n_v` starts at 1 and stays
/// positive.
pub struct LayerCodebook<T> {
    pub codewords: Tensor<T>, // [V×d]
    pub ema_sum: Tensor<T>,   // [V×d]
    pub ema_count: Vec<T>,    // [V]
}

pub struct CodebookState<T> {
    pub layers: BTreeMap<usize, LayerCodebook<T>>,
    pub decay: f64,
}

impl<T: Scalar> CodebookState<T> {
    /// `s` initialized with unit-normal entries scaled by 1/√d, `n` to 1,
    /// so `C = s/n = s` at the start.
    pub fn new<R: Rng>(
        layer_indices: impl IntoIterator<Item = usize>,
        vocab: usize,
        dim: usize,
        decay: f64,
        rng: &mut R,
    ) -> Self {
        let scale = 1.0 / (dim as f64).sqrt();
        let layers = layer_indices
            .into_iter()
            .map(|k| {
                let s = Tensor::randn(&[vocab, dim], scale, rng);
                (
                    k,
                    LayerCodebook {
                        codewords: s.clone(),
                        ema_sum: s,
                        ema_count: vec![T::one(); vocab],
                    },
                )
            })
            .collect();
        CodebookState { layers, decay }
    }

    pub fn vocab(&self) -> usize {
        self.layers.values().next().map(|c| c.codewords.rows()).unwrap_or(0)
    }

    pub fn predicted_layers(&self) -> Vec<usize> {
        self.layers.keys().copied().collect()
    }

    /// Nearest-codeword assignment for layer `k`.
    pub fn assign(&self, k: usize, z: &Tensor<T>) -> Vec<usize> {
        assign_codes(z, &self.layers[&k].codewords)
    }

    /// EMA update from one batch of assigned teacher embeddings (Eq-style:
    /// activated codewords move, the rest stay put; `C_v = s_v/n_v`).
    pub fn update(&mut self, k: usize, z: &Tensor<T>, assignments: &[usize]) {
        let cb = self.layers.get_mut(&k).expect("codebook layer");
        let (vocab, dim) = (cb.codewords.rows(), cb.codewords.cols());
        assert_eq!(z.rows(), assignments.len());
        assert_eq!(z.cols(), dim);
        let tau = T::from_f64(self.decay);
        let one_m_tau = T::from_f64(1.0 - self.decay);
        let mut sums = vec![T::zero(); vocab * dim];
        let mut counts = vec![0usize; vocab];
        for (i, &v) in assignments.iter().enumerate() {
            assert!(v < vocab);
            counts[v] += 1;
            let dst = &mut sums[v * dim..(v + 1) * dim];
            for (a, &b) in dst.iter_mut().zip(z.row(i)) {
                *a += b;
            }
        }
        for v in 0..vocab {
            if counts[v] == 0 {
                continue;
            }
            let srow = &mut cb.ema_sum.row_mut(v);
            for (s, &add) in srow.iter_mut().zip(&sums[v * dim..(v + 1) * dim]) {
                *s = tau * *s + one_m_tau * add;
            }
            cb.ema_count[v] = tau * cb.ema_count[v] + one_m_tau * T::from_f64(counts[v] as f64);
            let n = cb.ema_count[v];
            let crow = cb.codewords.row_mut(v);
            for (c, &s) in crow.iter_mut().zip(cb.ema_sum.row(v)) {
                *c = s / n;
            }
        }
    }
}

/// ℓ2-nearest codeword per frame, ties to the lowest codeword index.
pub fn assign_codes<T: Scalar>(z: &Tensor<T>, codewords: &Tensor<T>) -> Vec<usize> {
    let (n, d) = (z.rows(), z.cols());
    assert_eq!(codewords.cols(), d, "codebook dimension mismatch");
    let v = codewords.rows();
    (0..n)
        .map(|i| {
            let row = z.row(i);
            let mut best = 0usize;
            let mut best_d = T::infinity();
            for u in 0..v {
                let c = codewords.row(u);
                let mut dist = T::zero();
                for (&a, &b) in row.iter().zip(c) {
                    let diff = a - b;
                    dist += diff * diff;
                }
                if dist < best_d {
                    best_d = dist;
                    best = u;
                }
            }
            best
        })
        .collect()
}

/// One-hot matrix `[n×V]` from assignments.
pub fn one_hot<T: Scalar>(assignments: &[usize], vocab: usize) -> Tensor<T> {
    let mut out = Tensor::zeros(&[assignments.len(), vocab]);
    for (i, &v) in assignments.iter().enumerate() {
        out.row_mut(i)[v] = T::one();
    }
    out
}

// ---------------------------------------------------------------------------
// Teacher update
// ---------------------------------------------------------------------------

/// EMA update of the teacher from the student, elementwise
/// `θ_t ← β·θ_t + (1−β)·θ_s`, computed as `θ_t += (1−β)(θ_s − θ_t)` so the
/// complement's precision survives when β is within an ulp of 1.
/// Positional-encoding parameters are copied verbatim instead.
pub fn update_teacher<T: Scalar>(
    student: &EncoderStack<T>,
    teacher: &mut EncoderStack<T>,
    one_minus_beta: f64,
) -> Result<()> {
    let omb = T::from_f64(one_minus_beta);
    let mut mismatch: Option<String> = None;
    student.visit_pair(teacher, "", &mut |name, s, t| {
        if s.shape() != t.shape() {
            if mismatch.is_none() {
                mismatch = Some(format!("{name}: {:?} vs {:?}", s.shape(), t.shape()));
            }
            return;
        }
        if name.starts_with("pos_conv.") || one_minus_beta == 1.0 {
            // Positional parameters are always copied; β = 0 copies exactly.
            t.data_mut().copy_from_slice(s.data());
        } else if one_minus_beta != 0.0 {
            for (tv, &sv) in t.data_mut().iter_mut().zip(s.data()) {
                *tv += omb * (sv - *tv);
            }
        }
    });
    match mismatch {
        Some(m) => Err(CoreError::TreeMismatch(m)),
        None => Ok(()),
    }
}

// ---------------------------------------------------------------------------
// Perplexity
// ---------------------------------------------------------------------------

/// `2^H(p)` with `H` in bits; zero entries contribute nothing. For a
/// distribution over V outcomes the value lies in [1, V].
pub fn perplexity(p: &[f64]) -> f64 {
    let mut h = 0.0f64;
    for &v in p {
        if v > 0.0 {
            h -= v * v.log2();
        }
    }
    h.exp2()
}

/// Empirical distribution of integer assignments.
pub fn empirical_distribution(assignments: &[usize], vocab: usize) -> Vec<f64> {
    let mut counts = vec![0usize; vocab];
    for &a in assignments {
        counts[a] += 1;
    }
    let total = assignments.len().max(1) as f64;
    counts.into_iter().map(|c| c as f64 / total).collect()
}

// ---------------------------------------------------------------------------
// Model: encoder stack + mask embedding + prediction heads
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Per-layer taps: head k reads the student tap at layer k.
    Spidr,
    /// Every head reads the student's final-layer tap.
    Dinosr,
}

/// Student model: shared encoder stack, learned mask embedding, and one
/// linear prediction head per predicted layer (softmax applied in the loss).
pub struct SpidrModel<T> {
    pub stack: EncoderStack<T>,
    pub mask_embedding: Tensor<T>,
    pub heads: Vec<Linear<T>>,
    pub first_predicted_layer: usize,
}

impl<T: Scalar> SpidrModel<T> {
    pub fn new<R: Rng>(
        config: &EncoderConfig,
        num_codebooks: usize,
        vocab: usize,
        rng: &mut R,
    ) -> Self {
        assert!(
            num_codebooks >= 1 && num_codebooks <= config.num_layers,
            "predicted layer count must lie in 1..=L"
        );
        let stack = EncoderStack::new(config, rng);
        let d = config.hidden_dim;
        let mask_embedding = Tensor::randn(&[d], 1.0 / (d as f64).sqrt(), rng).with_grad();
        let first = config.num_layers - num_codebooks + 1;
        let heads = (0..num_codebooks)
            .map(|_| Linear::new(d, vocab, true, rng))
            .collect();
        SpidrModel {
            stack,
            mask_embedding,
            heads,
            first_predicted_layer: first,
        }
    }

    /// Predicted layer indices, ascending (1-based): L−K+1 ..= L.
    pub fn predicted_layers(&self) -> Vec<usize> {
        (self.first_predicted_layer..=self.stack.config.num_layers).collect()
    }

    pub fn head_for_layer(&self, layer: usize) -> Option<&Linear<T>> {
        layer
            .checked_sub(self.first_predicted_layer)
            .and_then(|i| self.heads.get(i))
    }
}

impl<T: Scalar> Parameterized<T> for SpidrModel<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.stack.visit(&join(prefix, "stack"), f);
        f(&join(prefix, "mask_embedding"), &self.mask_embedding);
        for (i, h) in self.heads.iter().enumerate() {
            h.visit(&join(prefix, &format!("head{i}")), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.stack.visit_mut(&join(prefix, "stack"), f);
        f(&join(prefix, "mask_embedding"), &mut self.mask_embedding);
        for (i, h) in self.heads.iter_mut().enumerate() {
            h.visit_mut(&join(prefix, &format!("head{i}")), f);
        }
    }
    fn visit_pair(
        &self,
        other: &mut Self,
        prefix: &str,
        f: &mut dyn FnMut(&str, &Tensor<T>, &mut Tensor<T>),
    ) {
        self.stack.visit_pair(&mut other.stack, &join(prefix, "stack"), f);
        f(
            &join(prefix, "mask_embedding"),
            &self.mask_embedding,
            &mut other.mask_embedding,
        );
        assert_eq!(self.heads.len(), other.heads.len(), "head count mismatch");
        for (i, (a, b)) in self.heads.iter().zip(other.heads.iter_mut()).enumerate() {
            a.visit_pair(b, &join(prefix, &format!("head{i}")), f);
        }
    }
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Masked multi-layer cross-entropy (forward only):
/// `−(1/(|M|·K))·Σ_{i∈M,k} log ỹᵏᵢ[targetᵏᵢ]`, log floored at 1e-9.
/// With `Objective::Dinosr` every head reads the final-layer tap.
/// Layers whose tap is missing (layer-dropped) are excluded from both the
/// sum and the normalizer. Errors when the mask is empty.
pub fn masked_objective_loss<T: Scalar>(
    objective: Objective,
    taps: &EncoderTaps<T>,
    heads: &[Linear<T>],
    first_predicted_layer: usize,
    targets: &BTreeMap<usize, Vec<usize>>,
    mask: &MaskSpec,
) -> Result<f64> {
    if mask.is_empty() {
        return Err(CoreError::EmptyMask);
    }
    let last_layer = first_predicted_layer + heads.len() - 1;
    let mut total = 0.0f64;
    let mut terms = 0usize;
    let floor = LOG_FLOOR.ln();
    for (i, head) in heads.iter().enumerate() {
        let layer = first_predicted_layer + i;
        let source_layer = match objective {
            Objective::Spidr => layer,
            Objective::Dinosr => last_layer,
        };
        let tap = match taps.taps.get(&source_layer) {
            Some(t) => t,
            None => continue,
        };
        let target = &targets[&layer];
        let rows = gather_rows(tap, mask.indices());
        let logits = head.forward(&rows);
        let v = logits.cols();
        let mut scratch = vec![T::zero(); v];
        for (r, &frame) in mask.indices().iter().enumerate() {
            ops::log_softmax_row(logits.row(r), &mut scratch);
            let lp = scratch[target[frame]].as_f64().max(floor);
            total -= lp;
            terms += 1;
        }
    }
    if terms == 0 {
        return Err(CoreError::EmptyMask);
    }
    Ok(total / terms as f64)
}

pub fn gather_rows<T: Scalar>(x: &Tensor<T>, indices: &[usize]) -> Tensor<T> {
    let d = x.cols();
    let mut out = Tensor::zeros(&[indices.len(), d]);
    for (r, &i) in indices.iter().enumerate() {
        out.row_mut(r).copy_from_slice(x.row(i));
    }
    out
}

fn scatter_rows_add<T: Scalar>(dst: &mut Tensor<T>, src: &Tensor<T>, indices: &[usize]) {
    for (r, &i) in indices.iter().enumerate() {
        for (d, &s) in dst.row_mut(i).iter_mut().zip(src.row(r)) {
            *d += s;
        }
    }
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DistillConfig {
    pub encoder: EncoderConfig,
    /// Number of predicted layers (codebooks), counted from the top.
    pub num_codebooks: usize,
    pub codebook_size: usize,
    pub codebook_decay: f64,
    pub objective: Objective,
    pub teacher_schedule: TeacherSchedule,
    pub schedule: TrainSchedule,
    pub mask: MaskParams,
    pub seed: u64,
    /// Switch for the frozen-system determinism checks.
    pub update_codebooks: bool,
}

impl DistillConfig {
    pub fn paper() -> Self {
        DistillConfig {
            encoder: EncoderConfig::paper(),
            num_codebooks: 8,
            codebook_size: 256,
            codebook_decay: 0.9,
            objective: Objective::Spidr,
            teacher_schedule: TeacherSchedule::exponential_default(),
            schedule: TrainSchedule::paper(),
            mask: MaskParams::default(),
            seed: 0,
            update_codebooks: true,
        }
    }

    pub fn desk() -> Self {
        DistillConfig {
            encoder: EncoderConfig::desk(),
            num_codebooks: 3,
            codebook_size: 16,
            codebook_decay: 0.9,
            objective: Objective::Spidr,
            teacher_schedule: TeacherSchedule::Exponential {
                beta0: 0.999,
                timescale: 1_000.0,
            },
            schedule: TrainSchedule::desk(),
            mask: MaskParams::default(),
            seed: 0,
            update_codebooks: true,
        }
    }
}

/// Per-step statistics (the CSV row the training loop emits).
#[derive(Clone, Debug)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub beta: f64,
    pub grad_norm: f64,
    pub masked_frames: usize,
    /// Per predicted layer, ascending.
    pub codebook_perplexity: Vec<f64>,
    pub prediction_perplexity: Vec<f64>,
}

pub struct Trainer<T> {
    pub cfg: DistillConfig,
    pub student: SpidrModel<T>,
    pub teacher: EncoderStack<T>,
    pub codebooks: CodebookState<T>,
    pub optimizer: AdamW<T>,
    pub step: u64,
}

/// splitmix64 finalizer; derives independent per-sequence rng streams.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn seq_rng(seed: u64, step: u64, index: usize, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix64(
        seed ^ mix64(step ^ mix64(index as u64 ^ mix64(salt))),
    ))
}

struct SequenceGrads<T> {
    loss_sum: f64,
    terms: usize,
    /// (layer, z rows, assignments) for the codebook update.
    teacher_embeddings: BTreeMap<usize, (Tensor<T>, Vec<usize>)>,
    /// Per-layer softmax sums and row counts over masked rows
    /// (prediction perplexity).
    prob_sums: BTreeMap<usize, (Vec<f64>, usize)>,
    masked: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(cfg: DistillConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let student = SpidrModel::new(
            &cfg.encoder,
            cfg.num_codebooks,
            cfg.codebook_size,
            &mut rng,
        );
        // Teacher starts as an exact, gradient-free copy of the student
        // stack (it never receives optimizer gradients).
        let mut teacher = EncoderStack::new(&cfg.encoder, &mut rng);
        student.stack.visit_pair(&mut teacher, "", &mut |_, s, t| {
            t.data_mut().copy_from_slice(s.data());
        });
        teacher.visit_mut("", &mut |_, t| t.disable_grad());
        let codebooks = CodebookState::new(
            student.predicted_layers(),
            cfg.codebook_size,
            cfg.encoder.hidden_dim,
            cfg.codebook_decay,
            &mut rng,
        );
        let optimizer = AdamW::new(AdamWParams::default());
        Trainer {
            cfg,
            student,
            teacher,
            codebooks,
            optimizer,
            step: 0,
        }
    }

    pub fn predicted_layers(&self) -> Vec<usize> {
        self.student.predicted_layers()
    }

    /// Teacher forward on the clean waveform: instance-normalized taps and
    /// their codeword assignments (the prediction targets).
    fn teacher_targets(
        &self,
        waveform: &[T],
    ) -> Result<BTreeMap<usize, (Tensor<T>, Vec<usize>)>> {
        let layers = self.predicted_layers();
        let (frames, _) = self.teacher.downsample(waveform)?;
        let mut dummy = ChaCha8Rng::seed_from_u64(0);
        let (taps, _) = self.teacher.encode(&frames, &layers, &[], false, &mut dummy);
        let eps = T::from_f64(INSTANCE_NORM_EPS);
        let mut out = BTreeMap::new();
        for k in layers {
            let z = ops::instance_norm(&taps.taps[&k], eps);
            let assignments = self.codebooks.assign(k, &z);
            out.insert(k, (z, assignments));
        }
        Ok(out)
    }

    /// Forward + backward for one sequence; accumulates parameter grads
    /// scaled by raw counts (normalization applied afterwards via
    /// `rescale`), returns per-sequence sums. `None` if the sequence is
    /// unusable (too short or nothing masked).
    fn sequence_pass(
        &mut self,
        waveform: &[T],
        index: usize,
        collect_grads: bool,
    ) -> Result<Option<SequenceGrads<T>>> {
        let n = match self.student.stack.frontend.out_len(waveform.len()) {
            Ok(n) => n,
            Err(_) => return Ok(None), // too short: skip, don't crash
        };
        if n == 0 {
            return Ok(None);
        }
        let targets = self.teacher_targets(waveform)?;

        let mut mask_rng = seq_rng(self.cfg.seed, self.step, index, 0xA5);
        let mask = sample_mask(n, &self.cfg.mask, &mut mask_rng);
        if mask.is_empty() {
            return Ok(None);
        }

        let (frames, fcache) = self.student.stack.downsample(waveform)?;
        let corrupted = apply_mask(&frames, &mask, &self.student.mask_embedding);
        let capture: Vec<usize> = match self.cfg.objective {
            Objective::Spidr => self.predicted_layers(),
            Objective::Dinosr => vec![self.cfg.encoder.num_layers],
        };
        let mut fwd_rng = seq_rng(self.cfg.seed, self.step, index, 0xB7);
        let (taps, ecache) =
            self.student
                .stack
                .encode(&corrupted, &capture, &[], true, &mut fwd_rng);

        let last_layer = self.cfg.encoder.num_layers;
        let floor = LOG_FLOOR.ln();
        let vocab = self.cfg.codebook_size;
        let mut loss_sum = 0.0f64;
        let mut terms = 0usize;
        let mut prob_sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
        // Gradient w.r.t. each captured tap, assembled head by head.
        let mut tap_grads: BTreeMap<usize, Tensor<T>> = BTreeMap::new();

        for (i, layer) in self.predicted_layers().into_iter().enumerate() {
            let source_layer = match self.cfg.objective {
                Objective::Spidr => layer,
                Objective::Dinosr => last_layer,
            };
            let tap = match taps.taps.get(&source_layer) {
                Some(t) => t,
                None => continue, // layer-dropped: excluded from the loss
            };
            let target = &targets[&layer].1;
            let rows = gather_rows(tap, mask.indices());
            let head = &self.student.heads[i];
            let logits = head.forward(&rows);
            let m = logits.rows();
            let mut dlogits = Tensor::zeros(&[m, vocab]);
            let mut probs = vec![T::zero(); vocab];
            let mut scratch = vec![T::zero(); vocab];
            let psum = prob_sums
                .entry(layer)
                .or_insert_with(|| (vec![0.0; vocab], 0));
            for (r, &frame) in mask.indices().iter().enumerate() {
                let t_idx = target[frame];
                ops::log_softmax_row(logits.row(r), &mut scratch);
                loss_sum -= scratch[t_idx].as_f64().max(floor);
                terms += 1;
                ops::softmax_row(logits.row(r), &mut probs);
                psum.1 += 1;
                for (ps, &p) in psum.0.iter_mut().zip(&probs) {
                    *ps += p.as_f64();
                }
                if collect_grads {
                    let drow = dlogits.row_mut(r);
                    drow.copy_from_slice(&probs);
                    drow[t_idx] -= T::one();
                }
            }
            if collect_grads {
                let head = &mut self.student.heads[i];
                let grows = head.backward(&rows, &dlogits);
                let entry = tap_grads
                    .entry(source_layer)
                    .or_insert_with(|| Tensor::zeros(tap.shape()));
                scatter_rows_add(entry, &grows, mask.indices());
            }
        }

        if terms == 0 {
            return Ok(None);
        }

        if collect_grads {
            let gframes_corrupted = self.student.stack.encode_backward(
                &ecache,
                None,
                &tap_grads,
                frames.shape(),
            );
            let (gframes, gemb) = apply_mask_backward(&gframes_corrupted, &mask);
            self.student.mask_embedding.add_to_grad(&gemb);
            self.student.stack.frontend_backward(&fcache, &gframes);
        }

        Ok(Some(SequenceGrads {
            loss_sum,
            terms,
            teacher_embeddings: targets,
            prob_sums,
            masked: mask.len(),
        }))
    }

    /// Rescale accumulated gradients by 1/terms (the loss normalizer).
    fn rescale_grads(&mut self, terms: usize) {
        let scale = T::from_f64(1.0 / terms as f64);
        self.student.visit_mut("", &mut |_, t| {
            if t.requires_grad() {
                for g in t.grad_mut() {
                    *g *= scale;
                }
            }
        });
    }

    /// The training loss of `batch` at the current step, without touching
    /// any state (masks and dropout derive from the step index).
    pub fn loss_only(&mut self, batch: &[&[T]]) -> Result<f64> {
        let mut loss_sum = 0.0;
        let mut terms = 0usize;
        for (idx, wav) in batch.iter().enumerate() {
            if let Some(sg) = self.sequence_pass(wav, idx, false)? {
                loss_sum += sg.loss_sum;
                terms += sg.terms;
            }
        }
        if terms == 0 {
            return Err(CoreError::EmptyMask);
        }
        Ok(loss_sum / terms as f64)
    }

    /// Forward + backward over `batch`, leaving normalized gradients in the
    /// student (no optimizer/teacher/codebook update). Returns the loss.
    pub fn compute_grads(&mut self, batch: &[&[T]]) -> Result<f64> {
        zero_grads(&mut self.student);
        let mut loss_sum = 0.0;
        let mut terms = 0usize;
        for (idx, wav) in batch.iter().enumerate() {
            if let Some(sg) = self.sequence_pass(wav, idx, true)? {
                loss_sum += sg.loss_sum;
                terms += sg.terms;
            }
        }
        if terms == 0 {
            return Err(CoreError::EmptyMask);
        }
        self.rescale_grads(terms);
        Ok(loss_sum / terms as f64)
    }

    /// One full training step in the pipeline order: teacher forward →
    /// assignments → student forward → loss → backward → clip → optimizer →
    /// teacher EMA → codebook EMA. Returns `None` when every sequence in
    /// the batch was skipped (too short or nothing masked); the step
    /// counter advances either way.
    pub fn train_step(&mut self, batch: &[&[T]]) -> Result<Option<StepStats>> {
        let t = self.step;
        let lr = self.cfg.schedule.lr_at(t);
        let omb = self.cfg.teacher_schedule.one_minus_beta(t);

        zero_grads(&mut self.student);
        let mut loss_sum = 0.0;
        let mut terms = 0usize;
        let mut masked_frames = 0usize;
        let mut codebook_data: BTreeMap<usize, (Vec<T>, Vec<usize>)> = BTreeMap::new();
        let mut prob_sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
        let dim = self.cfg.encoder.hidden_dim;

        for (idx, wav) in batch.iter().enumerate() {
            let sg = match self.sequence_pass(wav, idx, true)? {
                Some(sg) => sg,
                None => continue,
            };
            loss_sum += sg.loss_sum;
            terms += sg.terms;
            masked_frames += sg.masked;
            for (layer, (z, assignments)) in sg.teacher_embeddings {
                let entry = codebook_data
                    .entry(layer)
                    .or_insert_with(|| (Vec::new(), Vec::new()));
                entry.0.extend_from_slice(z.data());
                entry.1.extend_from_slice(&assignments);
            }
            for (layer, (ps, rows)) in sg.prob_sums {
                let entry = prob_sums
                    .entry(layer)
                    .or_insert_with(|| (vec![0.0; ps.len()], 0));
                entry.1 += rows;
                for (a, b) in entry.0.iter_mut().zip(ps) {
                    *a += b;
                }
            }
        }

        if terms == 0 {
            self.step += 1;
            return Ok(None);
        }

        let loss = loss_sum / terms as f64;
        if !loss.is_finite() {
            return Err(CoreError::NonFinite(format!(
                "loss at step {t} (lr {lr:.3e}, {masked_frames} masked frames)"
            )));
        }
        self.rescale_grads(terms);

        // Freeze the conv feature extractor after the freeze step (the
        // post-extractor norm/projection keep training).
        let frozen_prefix = "stack.frontend.conv";
        let freeze = t >= self.cfg.schedule.conv_freeze_step;
        let grad_norm = self.optimizer.step(&mut self.student, lr, &move |name| {
            freeze && name.starts_with(frozen_prefix)
        });
        if !grad_norm.is_finite() {
            return Err(CoreError::NonFinite(format!("gradient norm at step {t}")));
        }

        update_teacher(&self.student.stack, &mut self.teacher, omb)?;

        let mut codebook_ppl = Vec::new();
        for (layer, (zdata, assignments)) in &codebook_data {
            let z = Tensor::from_vec(&[assignments.len(), dim], zdata.clone());
            if self.cfg.update_codebooks {
                self.codebooks.update(*layer, &z, assignments);
            }
            let p = empirical_distribution(assignments, self.cfg.codebook_size);
            codebook_ppl.push(perplexity(&p));
            let _ = layer;
        }
        let prediction_ppl: Vec<f64> = prob_sums
            .values()
            .map(|(sums, rows)| {
                let p: Vec<f64> = sums.iter().map(|s| s / (*rows).max(1) as f64).collect();
                perplexity(&p)
            })
            .collect();

        self.step += 1;
        Ok(Some(StepStats {
            step: t,
            loss,
            lr,
            beta: 1.0 - omb,
            grad_norm,
            masked_frames,
            codebook_perplexity: codebook_ppl,
            prediction_perplexity: prediction_ppl,
        }))
    }

    /// Dataset-averaged per-layer perplexities on held-out audio, computed
    /// per batch and then averaged. Codebook perplexity uses teacher
    /// assignments on clean input; prediction perplexity uses the student's
    /// unmasked forward through the heads.
    pub fn monitor_perplexity(
        &self,
        dataset: &[&[T]],
        batch_size: usize,
    ) -> Result<PerplexityReport> {
        assert!(batch_size >= 1);
        let layers = self.predicted_layers();
        let vocab = self.cfg.codebook_size;
        let mut codebook_acc = vec![0.0f64; layers.len()];
        let mut pred_acc = vec![0.0f64; layers.len()];
        let mut batches = 0usize;
        let mut dummy = ChaCha8Rng::seed_from_u64(0);
        for batch in dataset.chunks(batch_size) {
            let mut assignment_pool: Vec<Vec<usize>> = vec![Vec::new(); layers.len()];
            let mut prob_pool: Vec<Vec<f64>> = vec![vec![0.0; vocab]; layers.len()];
            let mut frames_total = 0usize;
            for wav in batch {
                let targets = self.teacher_targets(wav)?;
                let (frames, _) = self.student.stack.downsample(wav)?;
                let capture: Vec<usize> = match self.cfg.objective {
                    Objective::Spidr => layers.clone(),
                    Objective::Dinosr => vec![self.cfg.encoder.num_layers],
                };
                let (taps, _) =
                    self.student
                        .stack
                        .encode(&frames, &capture, &[], false, &mut dummy);
                frames_total += frames.rows();
                for (li, layer) in layers.iter().enumerate() {
                    assignment_pool[li].extend_from_slice(&targets[layer].1);
                    let source_layer = match self.cfg.objective {
                        Objective::Spidr => *layer,
                        Objective::Dinosr => self.cfg.encoder.num_layers,
                    };
                    let logits = self.student.heads[li].forward(&taps.taps[&source_layer]);
                    let mut probs = vec![T::zero(); vocab];
                    for r in 0..logits.rows() {
                        ops::softmax_row(logits.row(r), &mut probs);
                        for (a, &p) in prob_pool[li].iter_mut().zip(&probs) {
                            *a += p.as_f64();
                        }
                    }
                }
            }
            if frames_total == 0 {
                continue;
            }
            for li in 0..layers.len() {
                let p = empirical_distribution(&assignment_pool[li], vocab);
                codebook_acc[li] += perplexity(&p);
                let mean: Vec<f64> = prob_pool[li]
                    .iter()
                    .map(|s| s / frames_total as f64)
                    .collect();
                pred_acc[li] += perplexity(&mean);
            }
            batches += 1;
        }
        if batches == 0 {
            return Err(CoreError::InvalidArgument("empty monitoring dataset".into()));
        }
        Ok(PerplexityReport {
            layers,
            codebook: codebook_acc.iter().map(|v| v / batches as f64).collect(),
            prediction: pred_acc.iter().map(|v| v / batches as f64).collect(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct PerplexityReport {
    pub layers: Vec<usize>,
    pub codebook: Vec<f64>,
    pub prediction: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn desk_cfg() -> DistillConfig {
        let mut cfg = DistillConfig::desk();
        cfg.encoder.dropout = 0.0;
        cfg.encoder.attn_dropout = 0.0;
        cfg
    }

    fn sine_wave(len: usize, freq: f64, phase: f64) -> Vec<f32> {
        (0..len)
            .map(|i| ((i as f64 * freq + phase).sin() * 0.3) as f32)
            .collect()
    }

    #[test]
    fn ema_decay_boundary_and_reference_values() {
        assert_eq!(ema_decay(0, 0.999, 10_000.0), 0.999);
        let expected = 1.0 - 0.001 * (-1.0f64).exp();
        assert!((ema_decay(10_000, 0.999, 10_000.0) - expected).abs() < 1e-12);
    }

    #[test]
    fn ema_decay_monotone_toward_one() {
        let sched = TeacherSchedule::exponential_default();
        let mut prev_beta = -1.0f64;
        let mut prev_omb = f64::INFINITY;
        for t in (0..=400_000u64).step_by(997) {
            let beta = sched.beta(t);
            let omb = sched.one_minus_beta(t);
            assert!(beta >= prev_beta, "beta decreased at t={t}");
            assert!(omb < prev_omb, "complement not strictly decreasing at t={t}");
            assert!(omb > 0.0, "complement vanished at t={t}");
            assert!(beta <= 1.0);
            prev_beta = beta;
            prev_omb = omb;
        }
        assert!(sched.beta(5_000_000) > 1.0 - 1e-12);
    }

    #[test]
    fn warmup_constant_schedule_ramps_then_holds() {
        let sched = TeacherSchedule::warmup_constant_default();
        assert_relative_eq!(sched.beta(0), 0.999, max_relative = 1e-12);
        assert_relative_eq!(sched.beta(15_000), (0.999 + 0.9999) / 2.0, max_relative = 1e-12);
        assert_relative_eq!(sched.beta(30_000), 0.9999, max_relative = 1e-12);
        assert_relative_eq!(sched.beta(400_000), 0.9999, max_relative = 1e-12);
    }

    #[test]
    fn lr_schedule_hits_paper_anchors() {
        let s = TrainSchedule::paper();
        assert_relative_eq!(s.lr_at(0), 5e-6, max_relative = 1e-12);
        assert_relative_eq!(s.lr_at(12_000), 5e-4, max_relative = 1e-9);
        assert_relative_eq!(s.lr_at(100_000), 5e-4, max_relative = 1e-12);
        assert_relative_eq!(s.lr_at(400_000), 5e-6, max_relative = 1e-9);
        assert_relative_eq!(s.lr_at(500_000), 5e-6, max_relative = 1e-12);
        // Continuity at segment boundaries.
        assert_relative_eq!(s.lr_at(200_000), s.lr_at(200_001), max_relative = 1e-3);
        // Monotone decay segment.
        assert!(s.lr_at(250_000) > s.lr_at(300_000));
    }

    #[test]
    fn update_teacher_boundary_cases() {
        let cfg = EncoderConfig::desk();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let student = EncoderStack::<f64>::new(&cfg, &mut rng);
        let mut teacher = EncoderStack::<f64>::new(&cfg, &mut rng);
        let teacher_orig = crate::params::flatten(&teacher);

        // β = 1 (complement 0): teacher unchanged except positional params copied.
        update_teacher(&student, &mut teacher, 0.0).unwrap();
        let mut expected_changed = 0usize;
        let mut changed = 0usize;
        let mut pos = 0usize;
        teacher.visit("", &mut |name, t| {
            let n = t.len();
            for (i, v) in t.iter().enumerate() {
                if (*v - teacher_orig[pos + i]).abs() > 0.0 {
                    changed += 1;
                }
            }
            if name.starts_with("pos_conv.") {
                expected_changed += n;
            }
            pos += n;
        });
        assert!(changed <= expected_changed, "non-positional params moved at beta=1");
        student.visit_pair(&mut teacher, "", &mut |name, s, t| {
            if name.starts_with("pos_conv.") {
                assert_eq!(s.data(), t.data(), "positional params not copied: {name}");
            }
        });

        // β = 0: teacher equals student everywhere.
        update_teacher(&student, &mut teacher, 1.0).unwrap();
        let sflat = crate::params::flatten(&student);
        let tflat = crate::params::flatten(&teacher);
        assert_eq!(sflat, tflat);
    }

    #[test]
    fn update_teacher_scalar_arithmetic() {
        // 2.0 toward 1.0 at β=0.9 → 1.9.
        let t = 2.0 + (1.0 - 0.9) * (1.0f64 - 2.0);
        assert_relative_eq!(t, 1.9, max_relative = 1e-12);
        let cfg = EncoderConfig::desk();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let student = EncoderStack::<f64>::new(&cfg, &mut rng);
        let mut teacher = EncoderStack::<f64>::new(&cfg, &mut rng);
        let s0 = crate::params::flatten(&student);
        let t0 = crate::params::flatten(&teacher);
        update_teacher(&student, &mut teacher, 0.1).unwrap();
        let t1 = crate::params::flatten(&teacher);
        let mut pos = 0usize;
        let mut checked = false;
        student.visit("", &mut |name, ten| {
            if !name.starts_with("pos_conv.") && !checked && ten.len() > 0 {
                for i in 0..ten.len() {
                    let expect = t0[pos + i] + 0.1 * (s0[pos + i] - t0[pos + i]);
                    assert_relative_eq!(t1[pos + i], expect, max_relative = 1e-12);
                }
                checked = true;
            }
            pos += ten.len();
        });
        assert!(checked);
    }

    #[test]
    fn update_teacher_rejects_shape_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg_a = EncoderConfig::desk();
        let mut cfg_b = EncoderConfig::desk();
        cfg_b.ffn_dim = 64;
        let student = EncoderStack::<f64>::new(&cfg_a, &mut rng);
        let mut teacher = EncoderStack::<f64>::new(&cfg_b, &mut rng);
        assert!(update_teacher(&student, &mut teacher, 0.5).is_err());
    }

    #[test]
    fn assign_codes_exact_and_tie_cases() {
        let codebook = Tensor::from_vec(
            &[4, 2],
            vec![0.0f64, 0.0, 1.0, 0.0, -1.0, 0.0, 3.0, 4.0],
        );
        // Row equal to codeword 3.
        let z = Tensor::from_vec(&[1, 2], vec![3.0, 4.0]);
        assert_eq!(assign_codes(&z, &codebook), vec![3]);
        // Equidistant between codewords 1 (1,0) and 2 (−1,0): tie → index 1.
        let z = Tensor::from_vec(&[1, 2], vec![0.0, 5.0]);
        // distance to 0 is 25, to 1 is 26, to 2 is 26 — nearest is 0 here;
        // move to x=0,y=0.5 so 1 and 2 tie and beat 3 but not 0.
        let z2 = Tensor::from_vec(&[1, 2], vec![0.0, 0.0]);
        assert_eq!(assign_codes(&z2, &codebook), vec![0]);
        let tie = Tensor::from_vec(&[2, 2], vec![0.0, 2.0, 0.0, -2.0]);
        // (0,2): d²(cw0)=4, d²(cw1)=5, d²(cw2)=5 → cw0; need a real tie:
        let cb = Tensor::from_vec(&[3, 1], vec![1.0f64, -1.0, 5.0]);
        let zt = Tensor::from_vec(&[1, 1], vec![0.0]);
        assert_eq!(assign_codes(&zt, &cb), vec![0], "tie must pick lowest index");
        let _ = (z, tie);
    }

    #[test]
    fn assign_codes_matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let z = Tensor::<f64>::randn(&[5, 2], 1.0, &mut rng);
        let cb = Tensor::<f64>::randn(&[4, 2], 1.0, &mut rng);
        let got = assign_codes(&z, &cb);
        for i in 0..5 {
            let mut best = (f64::INFINITY, 0usize);
            for v in 0..4 {
                let d: f64 = z
                    .row(i)
                    .iter()
                    .zip(cb.row(v))
                    .map(|(&a, &b)| (a - b) * (a - b))
                    .sum();
                if d < best.0 {
                    best = (d, v);
                }
            }
            assert_eq!(got[i], best.1);
        }
    }

    #[test]
    fn codebook_update_hand_example_and_inactive_branch() {
        // Scalar d=1: s=1.0, n=1, τ=0.9, assigned {2.0, 4.0}.
        let mut state = CodebookState::<f64> {
            layers: BTreeMap::new(),
            decay: 0.9,
        };
        state.layers.insert(
            1,
            LayerCodebook {
                codewords: Tensor::from_vec(&[2, 1], vec![1.0, 5.0]),
                ema_sum: Tensor::from_vec(&[2, 1], vec![1.0, 5.0]),
                ema_count: vec![1.0, 1.0],
            },
        );
        let z = Tensor::from_vec(&[2, 1], vec![2.0, 4.0]);
        state.update(1, &z, &[0, 0]);
        let cb = &state.layers[&1];
        assert_relative_eq!(cb.ema_sum.data()[0], 0.9 + 0.1 * 6.0, max_relative = 1e-12);
        assert_relative_eq!(cb.ema_count[0], 0.9 + 0.1 * 2.0, max_relative = 1e-12);
        assert_relative_eq!(cb.codewords.data()[0], 1.5 / 1.1, epsilon = 1e-12);
        // Codeword 1 received nothing: untouched.
        assert_eq!(cb.ema_sum.data()[1], 5.0);
        assert_eq!(cb.ema_count[1], 1.0);
        assert_eq!(cb.codewords.data()[1], 5.0);
    }

    #[test]
    fn codebook_converges_geometrically_to_fixed_assignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut state = CodebookState::<f64>::new([1], 4, 3, 0.9, &mut rng);
        let target = [2.0f64, -1.0, 0.5];
        let z = Tensor::from_vec(&[1, 3], target.to_vec());
        let mut errs = Vec::new();
        for _ in 0..50 {
            state.update(1, &z, &[2]);
            let c = state.layers[&1].codewords.row(2);
            let err: f64 = c
                .iter()
                .zip(&target)
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            errs.push(err);
        }
        assert!(errs[49] < 1e-2 * errs[0].max(1e-9) || errs[49] < 1e-9);
        // Ratio approaches τ = 0.9 once transients die out.
        for w in 30..45 {
            if errs[w] > 1e-12 {
                let ratio = errs[w + 1] / errs[w];
                assert!(
                    (ratio - 0.9).abs() < 0.05,
                    "step {w}: contraction ratio {ratio}"
                );
            }
        }
        // Invariant: C = s/n exactly after every update.
        let cb = &state.layers[&1];
        for v in 0..4 {
            for j in 0..3 {
                assert_eq!(
                    cb.codewords.row(v)[j],
                    cb.ema_sum.row(v)[j] / cb.ema_count[v]
                );
            }
        }
    }

    #[test]
    fn perplexity_anchor_values() {
        let uniform: Vec<f64> = vec![1.0 / 256.0; 256];
        assert_eq!(perplexity(&uniform), 256.0);
        let mut onehot = vec![0.0; 16];
        onehot[3] = 1.0;
        assert_eq!(perplexity(&onehot), 1.0);
        let mut half = vec![0.0; 16];
        half[0] = 0.5;
        half[1] = 0.5;
        assert_eq!(perplexity(&half), 2.0);
    }

    #[test]
    fn loss_perfect_prediction_is_zero_and_uniform_is_log_v() {
        use crate::encoder::EncoderTaps;
        let v = 16usize;
        let d = 8usize;
        let n = 6usize;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mask = MaskSpec::from_indices(vec![1, 3, 4]);
        let mut targets = BTreeMap::new();
        targets.insert(1usize, vec![2usize, 7, 2, 9, 0, 5]);

        // Uniform head: zero weights and bias → softmax uniform → ln V.
        let head = Linear::<f64> {
            weight: Tensor::zeros(&[v, d]),
            bias: Some(Tensor::zeros(&[v])),
        };
        let mut taps = BTreeMap::new();
        taps.insert(1usize, Tensor::<f64>::randn(&[n, d], 1.0, &mut rng));
        let enc_taps = EncoderTaps {
            taps,
            block_outputs: BTreeMap::new(),
            final_output: Tensor::zeros(&[n, d]),
        };
        let loss = masked_objective_loss(
            Objective::Spidr,
            &enc_taps,
            std::slice::from_ref(&head),
            1,
            &targets,
            &mask,
        )
        .unwrap();
        assert_relative_eq!(loss, (v as f64).ln(), max_relative = 1e-12);

        // Peaked head: bias pushes the target logit far above the rest for
        // every frame; use a constant target so one bias vector suffices.
        let mut bias = Tensor::zeros(&[v]);
        bias.data_mut()[7] = 200.0;
        let peaked = Linear::<f64> {
            weight: Tensor::zeros(&[v, d]),
            bias: Some(bias),
        };
        let mut targets7 = BTreeMap::new();
        targets7.insert(1usize, vec![7usize; n]);
        let loss = masked_objective_loss(
            Objective::Spidr,
            &enc_taps,
            std::slice::from_ref(&peaked),
            1,
            &targets7,
            &mask,
        )
        .unwrap();
        assert!(loss.abs() < 1e-12, "perfect prediction loss {loss}");

        // Empty mask is an error, not a crash.
        let err = masked_objective_loss(
            Objective::Spidr,
            &enc_taps,
            std::slice::from_ref(&peaked),
            1,
            &targets7,
            &MaskSpec::default(),
        );
        assert!(matches!(err, Err(CoreError::EmptyMask)));
    }

    #[test]
    fn dinosr_loss_reads_only_the_final_tap() {
        use crate::encoder::EncoderTaps;
        let (v, d, n) = (8usize, 4usize, 5usize);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let heads: Vec<Linear<f64>> = (0..3).map(|_| Linear::new(d, v, true, &mut rng)).collect();
        let mask = MaskSpec::from_indices(vec![0, 2]);
        let mut targets = BTreeMap::new();
        for k in 2..=4 {
            targets.insert(k, vec![1usize; n]);
        }
        let mk_taps = |seed: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let mut taps = BTreeMap::new();
            for k in 2..=4usize {
                taps.insert(k, Tensor::<f64>::randn(&[n, d], 1.0, &mut r));
            }
            EncoderTaps {
                taps,
                block_outputs: BTreeMap::new(),
                final_output: Tensor::zeros(&[n, d]),
            }
        };
        let taps_a = mk_taps(1);
        let mut taps_b = mk_taps(1);
        // Perturb a non-final tap: the final-tap objective must not care.
        taps_b.taps.insert(2, Tensor::<f64>::randn(&[n, d], 5.0, &mut rng));
        let la = masked_objective_loss(Objective::Dinosr, &taps_a, &heads, 2, &targets, &mask)
            .unwrap();
        let lb = masked_objective_loss(Objective::Dinosr, &taps_b, &heads, 2, &targets, &mask)
            .unwrap();
        assert_eq!(la, lb);
        // The per-layer objective does care.
        let sa = masked_objective_loss(Objective::Spidr, &taps_a, &heads, 2, &targets, &mask)
            .unwrap();
        let sb = masked_objective_loss(Objective::Spidr, &taps_b, &heads, 2, &targets, &mask)
            .unwrap();
        assert!(sa != sb);

        // When all taps are equal the two objectives coincide exactly.
        let mut taps_eq = mk_taps(4);
        let last = taps_eq.taps[&4].clone();
        taps_eq.taps.insert(2, last.clone());
        taps_eq.taps.insert(3, last);
        let le = masked_objective_loss(Objective::Dinosr, &taps_eq, &heads, 2, &targets, &mask)
            .unwrap();
        let se = masked_objective_loss(Objective::Spidr, &taps_eq, &heads, 2, &targets, &mask)
            .unwrap();
        assert_eq!(le, se);
    }

    #[test]
    fn single_layer_objectives_coincide() {
        use crate::encoder::EncoderTaps;
        let (v, d, n) = (6usize, 3usize, 4usize);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let head = vec![Linear::<f64>::new(d, v, true, &mut rng)];
        let mut taps = BTreeMap::new();
        taps.insert(1usize, Tensor::<f64>::randn(&[n, d], 1.0, &mut rng));
        let enc = EncoderTaps {
            taps,
            block_outputs: BTreeMap::new(),
            final_output: Tensor::zeros(&[n, d]),
        };
        let mut targets = BTreeMap::new();
        targets.insert(1usize, vec![0usize, 1, 2, 3]);
        let mask = MaskSpec::from_indices(vec![0, 1, 3]);
        let a = masked_objective_loss(Objective::Spidr, &enc, &head, 1, &targets, &mask).unwrap();
        let b = masked_objective_loss(Objective::Dinosr, &enc, &head, 1, &targets, &mask).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn train_step_is_bit_deterministic() {
        let cfg = desk_cfg();
        let batch_wavs: Vec<Vec<f32>> = (0..2)
            .map(|i| sine_wave(8000, 0.02 + 0.01 * i as f64, 0.3))
            .collect();
        let batch: Vec<&[f32]> = batch_wavs.iter().map(|w| w.as_slice()).collect();
        let run = |cfg: DistillConfig| -> Vec<f64> {
            let mut tr = Trainer::<f32>::new(cfg);
            (0..8)
                .map(|_| tr.train_step(&batch).unwrap().unwrap().loss)
                .collect()
        };
        let a = run(cfg.clone());
        let b = run(cfg);
        assert_eq!(a, b, "loss traces must be bit-identical");
    }

    #[test]
    fn frozen_system_keeps_loss_constant() {
        let mut cfg = desk_cfg();
        cfg.schedule.lr_init = 0.0;
        cfg.schedule.lr_peak = 0.0;
        cfg.schedule.lr_final = 0.0;
        cfg.teacher_schedule = TeacherSchedule::WarmupConstant {
            beta_start: 1.0,
            beta_end: 1.0,
            ramp_steps: 1,
        };
        cfg.update_codebooks = false;
        let wav = sine_wave(8000, 0.03, 0.0);
        let batch: Vec<&[f32]> = vec![&wav];
        let mut tr = Trainer::<f32>::new(cfg);
        let mut losses = Vec::new();
        for _ in 0..4 {
            tr.step = 0; // same step index → same mask stream
            losses.push(tr.train_step(&batch).unwrap().unwrap().loss);
        }
        assert!(losses.windows(2).all(|w| w[0] == w[1]), "{losses:?}");
    }

    #[test]
    fn train_step_skips_unmaskable_batches() {
        let mut cfg = desk_cfg();
        cfg.mask.start_prob = 0.0; // nothing ever masked
        let wav = sine_wave(8000, 0.03, 0.0);
        let batch: Vec<&[f32]> = vec![&wav];
        let mut tr = Trainer::<f32>::new(cfg);
        let out = tr.train_step(&batch).unwrap();
        assert!(out.is_none());
        assert_eq!(tr.step, 1, "step counter advances on skipped batches");

        // Too-short sequences are skipped, not crashed.
        let mut cfg = desk_cfg();
        cfg.mask.start_prob = 1.0;
        let tiny = sine_wave(64, 0.05, 0.0);
        let mut tr = Trainer::<f32>::new(cfg);
        let out = tr.train_step(&[&tiny[..]]).unwrap();
        assert!(out.is_none());
    }

    #[test]
    fn teacher_parameters_never_receive_gradients() {
        let cfg = desk_cfg();
        let wav = sine_wave(8000, 0.02, 0.1);
        let batch: Vec<&[f32]> = vec![&wav];
        let mut tr = Trainer::<f32>::new(cfg);
        tr.train_step(&batch).unwrap().unwrap();
        tr.teacher.visit("", &mut |name, t| {
            assert!(
                !t.requires_grad(),
                "teacher parameter {name} has a gradient buffer"
            );
        });
    }

    #[test]
    fn codebook_identity_holds_after_training_steps() {
        let cfg = desk_cfg();
        let wav = sine_wave(16000, 0.02, 0.1);
        let wav2 = sine_wave(16000, 0.05, 0.4);
        let batch: Vec<&[f32]> = vec![&wav, &wav2];
        let mut tr = Trainer::<f32>::new(cfg);
        for _ in 0..3 {
            tr.train_step(&batch).unwrap().unwrap();
        }
        for (layer, cb) in &tr.codebooks.layers {
            for v in 0..cb.codewords.rows() {
                assert!(cb.ema_count[v] > 0.0, "layer {layer} count {v} not positive");
                for j in 0..cb.codewords.cols() {
                    assert_eq!(
                        cb.codewords.row(v)[j],
                        cb.ema_sum.row(v)[j] / cb.ema_count[v],
                        "C = s/n violated at layer {layer}"
                    );
                }
            }
        }
    }

    #[test]
    fn stats_report_all_predicted_layers_in_range() {
        let cfg = desk_cfg();
        let wav = sine_wave(16000, 0.02, 0.1);
        let batch: Vec<&[f32]> = vec![&wav];
        let mut tr = Trainer::<f32>::new(cfg);
        let stats = tr.train_step(&batch).unwrap().unwrap();
        assert_eq!(stats.codebook_perplexity.len(), 3);
        assert_eq!(stats.prediction_perplexity.len(), 3);
        for &p in stats.codebook_perplexity.iter().chain(&stats.prediction_perplexity) {
            assert!(p >= 1.0 && p <= 16.0, "perplexity {p} outside [1, V]");
        }
        assert!(stats.loss.is_finite());
    }

    #[test]
    fn monitor_perplexity_single_batch_is_identity_average() {
        let cfg = desk_cfg();
        let wav = sine_wave(16000, 0.02, 0.1);
        let wav2 = sine_wave(16000, 0.04, 0.9);
        let tr = Trainer::<f32>::new(cfg);
        let one = tr.monitor_perplexity(&[&wav, &wav2], 2).unwrap();
        let again = tr.monitor_perplexity(&[&wav, &wav2], 2).unwrap();
        assert_eq!(one.codebook, again.codebook);
        assert_eq!(one.prediction, again.prediction);
        for &p in one.codebook.iter().chain(&one.prediction) {
            assert!(p >= 1.0 && p <= 16.0);
        }
    }

    #[test]
    fn uniform_heads_give_prediction_perplexity_v() {
        let cfg = desk_cfg();
        let wav = sine_wave(16000, 0.02, 0.1);
        let mut tr = Trainer::<f32>::new(cfg);
        for head in &mut tr.student.heads {
            head.weight = Tensor::zeros(head.weight.shape()).with_grad();
            if let Some(b) = &mut head.bias {
                *b = Tensor::zeros(b.shape()).with_grad();
            }
        }
        let report = tr.monitor_perplexity(&[&wav], 1).unwrap();
        for &p in &report.prediction {
            assert_relative_eq!(p, 16.0, max_relative = 1e-4);
        }
    }
}
