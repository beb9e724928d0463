//! Training-time perturbations: attention-scaled feature noise,
//! importance-weighted masking, edge edits and the counterfactual row shuffle.
//! Every function is a pure function of its seed.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::graph::Graph;
use crate::tensor::Tensor;

/// Mixes a base seed with a purpose tag and a step counter (splitmix64).
pub fn derive_seed(base: u64, tag: u64, step: u64) -> u64 {
    let mut z = base ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ step.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// The additive term `noise_scale · importance_i · ε_ij`.
pub fn noise_term(rows: usize, cols: usize, importance: &[f64], noise_scale: f64, seed: u64) -> Tensor {
    assert_eq!(importance.len(), rows, "one importance score per row");
    let mut r = rng(seed);
    let mut data = Vec::with_capacity(rows * cols);
    for &imp in importance {
        for _ in 0..cols {
            let e: f64 = r.sample(StandardNormal);
            data.push(noise_scale * imp * e);
        }
    }
    Tensor::matrix(rows, cols, data)
}

/// `h + noise_scale · importance_i · ε`. Returns `h` unchanged when the scale is 0.
pub fn augment_noise(h: &Tensor, importance: &[f64], noise_scale: f64, seed: u64) -> Tensor {
    if noise_scale == 0.0 {
        return h.clone();
    }
    let noise = noise_term(h.rows(), h.cols(), importance, noise_scale, seed);
    let data = h.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect();
    Tensor::matrix(h.rows(), h.cols(), data)
}

/// Per-node normalization of absolute input gradients to `[0, 1]`. Rows with
/// no gradient signal get uniform importance 1.
pub fn gradient_importance(grad: &[f64], rows: usize, cols: usize) -> Tensor {
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        let row = &grad[i * cols..(i + 1) * cols];
        let max = row.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if max > 0.0 {
            out.extend(row.iter().map(|v| v.abs() / max));
        } else {
            out.extend(std::iter::repeat_n(1.0, cols));
        }
    }
    Tensor::matrix(rows, cols, out)
}

/// 0/1 keep-mask with `P(keep) = 1 − mask_rate · importance`. `None` means
/// uniform importance 1.
pub fn mask_matrix(rows: usize, cols: usize, importance: Option<&Tensor>, mask_rate: f64, seed: u64) -> Tensor {
    let mut r = rng(seed);
    let data = (0..rows * cols)
        .map(|k| {
            let imp = importance.map_or(1.0, |t| t.data()[k]);
            let drop = (mask_rate * imp).clamp(0.0, 1.0);
            if r.random_bool(drop) {
                0.0
            } else {
                1.0
            }
        })
        .collect();
    Tensor::matrix(rows, cols, data)
}

pub fn augment_mask(h: &Tensor, importance: Option<&Tensor>, mask_rate: f64, seed: u64) -> Tensor {
    if mask_rate == 0.0 {
        return h.clone();
    }
    let mask = mask_matrix(h.rows(), h.cols(), importance, mask_rate, seed);
    let data = h.data().iter().zip(mask.data()).map(|(a, m)| a * m).collect();
    Tensor::matrix(h.rows(), h.cols(), data)
}

/// Drops each non-self-loop edge with probability `drop_rate`, then inserts
/// `round(add_rate · E)` new edges that are neither duplicates nor self-loops,
/// where `E` counts the original non-self-loop edges. Self-loops are kept.
pub fn augment_edges(g: &Graph, drop_rate: f64, add_rate: f64, seed: u64) -> Graph {
    if drop_rate == 0.0 && add_rate == 0.0 {
        return g.clone();
    }
    let mut r = rng(seed);
    let n = g.num_nodes();
    let mut present: HashSet<(usize, usize)> = g.edges().iter().copied().collect();
    let mut kept = Vec::with_capacity(g.num_edges());
    let mut non_loop = 0usize;
    for &(s, d) in g.edges() {
        if s == d {
            kept.push((s, d));
            continue;
        }
        non_loop += 1;
        if r.random_bool(drop_rate) {
            present.remove(&(s, d));
        } else {
            kept.push((s, d));
        }
    }
    let free = (n * n.saturating_sub(1)).saturating_sub(present.iter().filter(|(s, d)| s != d).count());
    let target = ((add_rate * non_loop as f64).round() as usize).min(free);
    let mut added = 0;
    while added < target {
        let s = r.random_range(0..n);
        let d = r.random_range(0..n);
        if s != d && present.insert((s, d)) {
            kept.push((s, d));
            added += 1;
        }
    }
    g.with_edges(kept)
}

/// Uniform random permutation of `0..n`.
pub fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut rng(seed));
    p
}

/// Sorted sample of `min(k, n)` distinct indices from `0..n`.
pub fn sample_rows(n: usize, k: usize, seed: u64) -> Vec<usize> {
    if k >= n {
        return (0..n).collect();
    }
    let mut idx = rand::seq::index::sample(&mut rng(seed), n, k).into_vec();
    idx.sort_unstable();
    idx
}

/// Sorted sample of at most `k` entries of `pool`.
pub fn sample_from(pool: &[usize], k: usize, seed: u64) -> Vec<usize> {
    sample_rows(pool.len(), k, seed).into_iter().map(|i| pool[i]).collect()
}
