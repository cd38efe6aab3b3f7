//! Span-mask sampling and application of the learned mask embedding.
//!
//! Each frame independently starts a span of `span_len` frames with
//! probability `start_prob`; spans may overlap and truncate at the sequence
//! end. The loss is later computed only over the masked set.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskParams {
    pub start_prob: f64,
    pub span_len: usize,
    pub allow_overlap: bool,
}

impl Default for MaskParams {
    fn default() -> Self {
        MaskParams {
            start_prob: 0.08,
            span_len: 10,
            allow_overlap: true,
        }
    }
}

/// Sorted masked frame indices (0-based) for one sequence.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MaskSpec {
    indices: Vec<usize>,
}

impl MaskSpec {
    pub fn from_indices(mut indices: Vec<usize>) -> Self {
        indices.sort_unstable();
        indices.dedup();
        MaskSpec { indices }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.indices.binary_search(&i).is_ok()
    }

    /// Lengths of maximal runs of consecutive masked frames.
    pub fn merged_span_lengths(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut iter = self.indices.iter();
        let mut start = match iter.next() {
            Some(&i) => i,
            None => return out,
        };
        let mut prev = start;
        for &i in iter {
            if i != prev + 1 {
                out.push(prev - start + 1);
                start = i;
            }
            prev = i;
        }
        out.push(prev - start + 1);
        out
    }
}

/// Sample a span mask for a sequence of `n` frames. Deterministic given the
/// rng state: exactly `n` draws are consumed, in frame order.
pub fn sample_mask<R: Rng>(n: usize, params: &MaskParams, rng: &mut R) -> MaskSpec {
    assert!(n >= 1, "cannot mask an empty sequence");
    let mut masked = vec![false; n];
    for i in 0..n {
        let start: f64 = rng.gen();
        if start < params.start_prob {
            let end = (i + params.span_len).min(n);
            for m in masked.iter_mut().take(end).skip(i) {
                *m = true;
            }
        }
    }
    let indices = masked
        .iter()
        .enumerate()
        .filter_map(|(i, &m)| m.then_some(i))
        .collect();
    MaskSpec { indices }
}

/// Replace masked rows of `frames` with the learned `mask_embedding`.
pub fn apply_mask<T: Scalar>(
    frames: &Tensor<T>,
    mask: &MaskSpec,
    mask_embedding: &Tensor<T>,
) -> Tensor<T> {
    let d = frames.cols();
    assert_eq!(mask_embedding.len(), d, "mask embedding dimension mismatch");
    let n = frames.rows();
    let mut out = frames.clone();
    for &i in mask.indices() {
        assert!(i < n, "mask index {i} out of range for {n} frames");
        out.row_mut(i).copy_from_slice(mask_embedding.data());
    }
    out
}

/// Backward of [`apply_mask`]: the upstream gradient routes to the clean
/// frames outside the mask and sums into the embedding on masked rows.
pub fn apply_mask_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    mask: &MaskSpec,
) -> (Tensor<T>, Vec<T>) {
    let d = grad_out.cols();
    let mut grad_frames = grad_out.clone();
    let mut grad_embedding = vec![T::zero(); d];
    for &i in mask.indices() {
        let row = grad_frames.row_mut(i);
        for (ge, g) in grad_embedding.iter_mut().zip(row.iter_mut()) {
            *ge += *g;
            *g = T::zero();
        }
    }
    (grad_frames, grad_embedding)
}

/// Statistics over Monte-Carlo draws of the mask: fraction of masked
/// frames, mean and median length of merged masked spans.
#[derive(Clone, Copy, Debug)]
pub struct MaskStats {
    pub masked_fraction: f64,
    pub mean_span_len: f64,
    pub median_span_len: f64,
    pub max_span_len: usize,
}

/// Monte-Carlo masking statistics: draws `draws` masks of length `n` and
/// pools merged-span lengths over all draws.
pub fn mask_statistics<R: Rng>(
    n: usize,
    params: &MaskParams,
    draws: usize,
    rng: &mut R,
) -> MaskStats {
    let mut masked_total = 0usize;
    let mut span_lengths: Vec<usize> = Vec::new();
    for _ in 0..draws {
        let mask = sample_mask(n, params, rng);
        masked_total += mask.len();
        span_lengths.extend(mask.merged_span_lengths());
    }
    span_lengths.sort_unstable();
    let count = span_lengths.len().max(1);
    let mean = span_lengths.iter().sum::<usize>() as f64 / count as f64;
    let median = if span_lengths.is_empty() {
        0.0
    } else if span_lengths.len() % 2 == 1 {
        span_lengths[span_lengths.len() / 2] as f64
    } else {
        let hi = span_lengths.len() / 2;
        (span_lengths[hi - 1] + span_lengths[hi]) as f64 / 2.0
    };
    MaskStats {
        masked_fraction: masked_total as f64 / (n * draws) as f64,
        mean_span_len: mean,
        median_span_len: median,
        max_span_len: span_lengths.last().copied().unwrap_or(0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_start_prob_masks_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = MaskParams {
            start_prob: 0.0,
            ..Default::default()
        };
        let mask = sample_mask(50, &params, &mut rng);
        assert!(mask.is_empty());
    }

    #[test]
    fn start_prob_one_saturates_with_truncation() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = MaskParams {
            start_prob: 1.0,
            span_len: 10,
            allow_overlap: true,
        };
        let mask = sample_mask(5, &params, &mut rng);
        assert_eq!(mask.indices(), &[0, 1, 2, 3, 4]);
    }

    #[test]
    fn deterministic_given_seed() {
        let params = MaskParams::default();
        let a = sample_mask(200, &params, &mut ChaCha8Rng::seed_from_u64(77));
        let b = sample_mask(200, &params, &mut ChaCha8Rng::seed_from_u64(77));
        assert_eq!(a, b);
    }

    #[test]
    fn interior_mask_probability_matches_closed_form() {
        // For interior frames, P(masked) = 1 - (1-p)^span_len.
        let params = MaskParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 200;
        let draws = 20_000;
        let mut hits = 0usize;
        let probe = 100; // interior frame
        for _ in 0..draws {
            if sample_mask(n, &params, &mut rng).contains(probe) {
                hits += 1;
            }
        }
        let p_hat = hits as f64 / draws as f64;
        let p_expected = 1.0 - (1.0 - 0.08f64).powi(10); // 0.5656
        assert!(
            (p_hat - p_expected).abs() < 0.01,
            "interior mask probability {p_hat} vs {p_expected}"
        );
    }

    #[test]
    fn edge_frames_are_less_likely_masked() {
        // Frame 0 can only be masked by a span starting at 0.
        let params = MaskParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let draws = 20_000;
        let mut hits = 0usize;
        for _ in 0..draws {
            if sample_mask(50, &params, &mut rng).contains(0) {
                hits += 1;
            }
        }
        let p_hat = hits as f64 / draws as f64;
        assert!((p_hat - 0.08).abs() < 0.01, "first-frame probability {p_hat}");
    }

    #[test]
    fn apply_mask_empty_is_identity() {
        let frames = Tensor::from_vec(&[3, 2], vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let emb = Tensor::from_vec(&[2], vec![9.0f32, 9.0]);
        let out = apply_mask(&frames, &MaskSpec::default(), &emb);
        assert_eq!(out.data(), frames.data());
    }

    #[test]
    fn apply_mask_full_replaces_every_row() {
        let frames = Tensor::from_vec(&[3, 2], vec![1.0f32; 6]);
        let emb = Tensor::from_vec(&[2], vec![7.0f32, 8.0]);
        let mask = MaskSpec::from_indices(vec![0, 1, 2]);
        let out = apply_mask(&frames, &mask, &emb);
        for i in 0..3 {
            assert_eq!(out.row(i), emb.data());
        }
    }

    #[test]
    fn mask_embedding_gradient_scales_with_mask_size() {
        let grad = Tensor::from_vec(&[4, 2], vec![1.0f64; 8]);
        let mask = MaskSpec::from_indices(vec![1, 3]);
        let (gframes, gemb) = apply_mask_backward(&grad, &mask);
        assert_eq!(gemb, vec![2.0, 2.0]);
        assert_eq!(gframes.row(1), &[0.0, 0.0]);
        assert_eq!(gframes.row(0), &[1.0, 1.0]);
    }

    #[test]
    fn merged_span_lengths_merge_adjacent_runs() {
        let mask = MaskSpec::from_indices(vec![0, 1, 2, 5, 6, 9]);
        assert_eq!(mask.merged_span_lengths(), vec![3, 2, 1]);
    }
}
