// SPDX-License-Identifier: MIT OR Apache-2.0

//! Random instance generators shared by the integration tests.

#![allow(dead_code)]

use orthoerase::linalg::{self, Mat};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

fn orthonormal(rng: &mut ChaCha8Rng, d: usize, n: usize) -> Vec<Vec<f64>> {
    loop {
        let raw: Vec<Vec<f64>> = (0..n).map(|_| gaussian_vec(rng, d)).collect();
        if let Ok(set) = linalg::gram_schmidt(&raw, 1e-8) {
            return set.basis().to_vec();
        }
    }
}

/// `n` spanning vectors in `d` dimensions whose Gram matrix has condition
/// number exactly `gram_cond` (singular values log-spaced).
pub fn spanning_with_condition(
    rng: &mut ChaCha8Rng,
    d: usize,
    n: usize,
    gram_cond: f64,
) -> Vec<Vec<f64>> {
    let left = orthonormal(rng, d, n);
    let right = orthonormal(rng, n, n);
    let scale: f64 = rng.gen_range(0.1..10.0);
    let sigma: Vec<f64> = (0..n)
        .map(|i| {
            let t = if n == 1 {
                0.0
            } else {
                i as f64 / (n - 1) as f64
            };
            scale * gram_cond.sqrt().powf(-t)
        })
        .collect();
    // column h = sum_i left_i * sigma_i * right[h][i]
    (0..n)
        .map(|h| {
            let mut col = vec![0.0; d];
            for i in 0..n {
                linalg::axpy(sigma[i] * right[i][h], &left[i], &mut col);
            }
            col
        })
        .collect()
}

pub fn columns(vs: &[Vec<f64>]) -> Mat {
    Mat::from_columns(vs).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Reduced pipeline used where many runs are needed.
pub fn small_config(seed: u64) -> orthoerase::pipeline::PipelineConfig {
    orthoerase::pipeline::PipelineConfig {
        token_length: 16,
        layers: 2,
        steps: 2,
        seed,
        ..Default::default()
    }
}

/// Text of `k` distinct axis tokens drawn from `range`.
pub fn axis_text(rng: &mut ChaCha8Rng, range: std::ops::Range<u32>, k: usize) -> String {
    let mut picked: Vec<u32> = Vec::with_capacity(k);
    while picked.len() < k {
        let a = rng.gen_range(range.clone());
        if !picked.contains(&a) {
            picked.push(a);
        }
    }
    picked
        .iter()
        .map(|a| format!("axis{a}"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Target text and a prompt built on disjoint axes, hence value-orthogonal
/// to the target at every position when `W_V` has orthonormal rows.
pub fn orthogonal_pair(seed: u64) -> (String, String) {
    let mut r = rng(seed);
    let target = axis_text(&mut r, 0..30, 2);
    let prompt = axis_text(&mut r, 31..62, 2);
    (target, prompt)
}
