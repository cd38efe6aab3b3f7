//! Discrete unit extraction: K-means quantization (k-means++ init, Lloyd
//! iterations), codebook-prediction quantization through the trained heads,
//! and deduplication.

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::distill::{Objective, SpidrModel};
use crate::error::{CoreError, Result};
use crate::tensor::{Scalar, Tensor};

/// Discrete token sequence for one utterance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UnitSequence {
    pub utt_id: String,
    pub tokens: Vec<u32>,
    pub deduped: bool,
}

impl UnitSequence {
    pub fn new(utt_id: impl Into<String>, tokens: Vec<u32>) -> Self {
        UnitSequence {
            utt_id: utt_id.into(),
            tokens,
            deduped: false,
        }
    }
}

/// Collapse consecutive duplicate tokens and set the dedup flag.
/// Idempotent.
pub fn dedup(units: &UnitSequence) -> UnitSequence {
    let mut tokens = Vec::with_capacity(units.tokens.len());
    for &t in &units.tokens {
        if tokens.last() != Some(&t) {
            tokens.push(t);
        }
    }
    UnitSequence {
        utt_id: units.utt_id.clone(),
        tokens,
        deduped: true,
    }
}

#[derive(Clone, Debug)]
pub struct KMeansModel<T> {
    pub centroids: Tensor<T>, // [V×d]
    pub inertia_history: Vec<f64>,
}

/// Lloyd's algorithm with k-means++ initialization. Stops at `max_iters`
/// or when the relative inertia improvement drops below `tol`. Empty
/// clusters are re-seeded to the point farthest from its assigned centroid.
pub fn kmeans_fit<T: Scalar>(
    x: &Tensor<T>,
    v: usize,
    max_iters: usize,
    tol: f64,
    seed: u64,
) -> Result<KMeansModel<T>> {
    let (n, d) = (x.rows(), x.cols());
    if v < 2 {
        return Err(CoreError::InvalidArgument("need at least 2 clusters".into()));
    }
    if n < v {
        return Err(CoreError::TooFewPoints { n, v });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding.
    let mut centroids = Tensor::zeros(&[v, d]);
    let first = rng.gen_range(0..n);
    centroids.row_mut(0).copy_from_slice(x.row(first));
    let mut min_d2: Vec<f64> = (0..n)
        .map(|i| dist2_f64(x.row(i), centroids.row(0)))
        .collect();
    for c in 1..v {
        let total: f64 = min_d2.iter().sum();
        let idx = if total <= 0.0 {
            // all remaining mass at distance zero: pick uniformly
            rng.gen_range(0..n)
        } else {
            WeightedIndex::new(&min_d2)
                .map(|w| w.sample(&mut rng))
                .unwrap_or_else(|_| rng.gen_range(0..n))
        };
        centroids.row_mut(c).copy_from_slice(x.row(idx));
        for (i, md) in min_d2.iter_mut().enumerate() {
            let d2 = dist2_f64(x.row(i), centroids.row(c));
            if d2 < *md {
                *md = d2;
            }
        }
    }

    let mut inertia_history = Vec::new();
    let mut assignments = vec![0usize; n];
    let mut prev_inertia = f64::INFINITY;
    for _ in 0..max_iters {
        // Assign (parallel, deterministic: each point independent).
        let inertia: f64 = {
            let cent = &centroids;
            assignments
                .par_iter_mut()
                .enumerate()
                .map(|(i, a)| {
                    let (best, best_d) = nearest(x.row(i), cent);
                    *a = best;
                    best_d
                })
                .sum()
        };
        inertia_history.push(inertia);

        // Update means (sequential accumulation in point order).
        let mut sums = vec![0.0f64; v * d];
        let mut counts = vec![0usize; v];
        for (i, &a) in assignments.iter().enumerate() {
            counts[a] += 1;
            let dst = &mut sums[a * d..(a + 1) * d];
            for (s, &xv) in dst.iter_mut().zip(x.row(i)) {
                *s += xv.as_f64();
            }
        }
        // Re-seed empty clusters to the farthest points.
        let mut farthest: Vec<usize> = (0..n).collect();
        farthest.sort_by(|&a, &b| {
            let da = dist2_f64(x.row(a), centroids.row(assignments[a]));
            let db = dist2_f64(x.row(b), centroids.row(assignments[b]));
            db.partial_cmp(&da).unwrap().then(a.cmp(&b))
        });
        let mut steal = farthest.into_iter();
        for c in 0..v {
            if counts[c] > 0 {
                let row = centroids.row_mut(c);
                for (cv, &s) in row.iter_mut().zip(&sums[c * d..(c + 1) * d]) {
                    *cv = T::from_f64(s / counts[c] as f64);
                }
            } else if let Some(p) = steal.next() {
                centroids.row_mut(c).copy_from_slice(x.row(p));
            }
        }

        if prev_inertia.is_finite() {
            let improvement = (prev_inertia - inertia) / prev_inertia.max(f64::MIN_POSITIVE);
            if improvement < tol {
                break;
            }
        }
        prev_inertia = inertia;
    }

    Ok(KMeansModel {
        centroids,
        inertia_history,
    })
}

/// Nearest-centroid index per frame, ties to the lowest index.
pub fn kmeans_assign<T: Scalar>(x: &Tensor<T>, model: &KMeansModel<T>) -> Result<Vec<u32>> {
    if x.cols() != model.centroids.cols() {
        return Err(CoreError::InvalidArgument(format!(
            "feature dim {} does not match centroid dim {}",
            x.cols(),
            model.centroids.cols()
        )));
    }
    let cent = &model.centroids;
    Ok((0..x.rows())
        .into_par_iter()
        .map(|i| nearest(x.row(i), cent).0 as u32)
        .collect())
}

fn nearest<T: Scalar>(row: &[T], centroids: &Tensor<T>) -> (usize, f64) {
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for c in 0..centroids.rows() {
        let d2 = dist2_f64(row, centroids.row(c));
        if d2 < best_d {
            best_d = d2;
            best = c;
        }
    }
    (best, best_d)
}

fn dist2_f64<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum()
}

/// Units from the trained prediction heads: argmax over φᵏ(tap) per frame
/// on an unmasked forward pass; ties to the lowest label. For the final-tap
/// objective the head reads the last layer's tap.
pub fn codebook_units<T: Scalar>(
    model: &SpidrModel<T>,
    objective: Objective,
    frames: &Tensor<T>,
    layer: usize,
) -> Result<Vec<u32>> {
    let head = model.head_for_layer(layer).ok_or_else(|| {
        CoreError::InvalidArgument(format!("layer {layer} has no prediction head"))
    })?;
    let source_layer = match objective {
        Objective::Spidr => layer,
        Objective::Dinosr => model.stack.config.num_layers,
    };
    let mut dummy = ChaCha8Rng::seed_from_u64(0);
    let (taps, _) = model
        .stack
        .encode(frames, &[source_layer], &[], false, &mut dummy);
    let logits = head.forward(&taps.taps[&source_layer]);
    Ok(argmax_rows(&logits))
}

/// Row-wise argmax with ties to the lowest index.
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<u32> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0usize;
            let mut best_v = row[0];
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > best_v {
                    best_v = v;
                    best = j;
                }
            }
            best as u32
        })
        .collect()
}
