//! Cross-layer stability of each channel: mean per-token cosine between a
//! channel at layer `l` and the same channel at the next layer, with
//! percentile-bootstrap confidence intervals.

use alloc::vec::Vec;

use thiserror::Error;

use crate::decomp::{DecompError, RouterBasis};
use crate::matrix::{dot, pairwise_sum, Matrix};
use crate::rng::CounterRng;

pub const DEFAULT_BOOTSTRAP: usize = 1000;
const RNG_STREAM_BOOT: u64 = 0x424f_4f54; // "BOOT"

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ContinuityError {
    #[error("layers carry different token streams ({left} vs {right} tokens)")]
    TokenStreamMismatch { left: usize, right: usize },
    #[error("need at least two layers")]
    TooFewLayers,
    #[error(transparent)]
    Decomp(#[from] DecompError),
}

/// Mean cosine of one channel across one layer pair.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct ChannelStat {
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Tokens that entered the mean.
    pub n_tokens: usize,
    /// Tokens skipped because a vector had zero norm.
    pub n_zero: usize,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct ContinuityPoint {
    pub layer: u32,
    pub next_layer: u32,
    pub visible: ChannelStat,
    pub blind: ChannelStat,
}

/// Cosine similarity; `None` when either vector is zero.
pub fn cosine(a: &[f32], b: &[f32]) -> Option<f64> {
    let na = dot(a, a);
    let nb = dot(b, b);
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((dot(a, b) / libm::sqrt(na * nb)).clamp(-1.0, 1.0))
}

/// Per-row cosines of two equally shaped matrices; zero rows are skipped.
pub fn row_cosines(a: &Matrix, b: &Matrix) -> (Vec<f64>, usize) {
    let mut out = Vec::with_capacity(a.rows());
    let mut zeros = 0;
    for (x, y) in a.iter_rows().zip(b.iter_rows()) {
        match cosine(x, y) {
            Some(c) => out.push(c),
            None => zeros += 1,
        }
    }
    (out, zeros)
}

/// Percentile bootstrap interval for the mean of `values`.
///
/// The interval is widened to contain the sample mean if the resampled
/// quantiles happen to exclude it.
pub fn bootstrap_mean_ci(values: &[f64], n_boot: usize, level: f64, seed: u64) -> (f64, f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let n = values.len();
    let mean = pairwise_sum(values) / n as f64;
    let mut rng = CounterRng::new(seed, RNG_STREAM_BOOT);
    let mut means = Vec::with_capacity(n_boot);
    let mut draw = Vec::with_capacity(n);
    for _ in 0..n_boot {
        draw.clear();
        draw.extend((0..n).map(|_| values[rng.below(n as u64) as usize]));
        means.push(pairwise_sum(&draw) / n as f64);
    }
    if means.is_empty() {
        return (mean, mean, mean);
    }
    means.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    let lo = quantile_sorted(&means, alpha);
    let hi = quantile_sorted(&means, 1.0 - alpha);
    (mean, lo.min(mean), hi.max(mean))
}

/// Linear-interpolated quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = libm::floor(pos) as usize;
    let hi = libm::ceil(pos) as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

fn channel_stat(a: &Matrix, b: &Matrix, n_boot: usize, seed: u64) -> ChannelStat {
    let (cos, n_zero) = row_cosines(a, b);
    let (mean, ci_low, ci_high) = bootstrap_mean_ci(&cos, n_boot, 0.95, seed);
    ChannelStat {
        mean,
        ci_low,
        ci_high,
        n_tokens: cos.len(),
        n_zero,
    }
}

/// Continuity of both channels between two consecutive layers, each
/// decomposed with its own router basis.
#[allow(clippy::too_many_arguments)]
pub fn pair_continuity(
    layer: u32,
    basis: &RouterBasis,
    states: &Matrix,
    next_layer: u32,
    next_basis: &RouterBasis,
    next_states: &Matrix,
    n_boot: usize,
    seed: u64,
) -> Result<ContinuityPoint, ContinuityError> {
    if states.rows() != next_states.rows() {
        return Err(ContinuityError::TokenStreamMismatch {
            left: states.rows(),
            right: next_states.rows(),
        });
    }
    let here = basis.batch_decompose(states)?;
    let there = next_basis.batch_decompose(next_states)?;
    let seed = seed ^ ((layer as u64) << 32);
    Ok(ContinuityPoint {
        layer,
        next_layer,
        visible: channel_stat(&here.visible, &there.visible, n_boot, seed),
        blind: channel_stat(&here.blind, &there.blind, n_boot, seed.wrapping_add(1)),
    })
}

/// Continuity over every adjacent pair of a layer band.
pub fn channel_continuity(
    layers: &[(u32, &RouterBasis, &Matrix)],
    n_boot: usize,
    seed: u64,
) -> Result<Vec<ContinuityPoint>, ContinuityError> {
    if layers.len() < 2 {
        return Err(ContinuityError::TooFewLayers);
    }
    layers
        .windows(2)
        .map(|w| pair_continuity(w[0].0, w[0].1, w[0].2, w[1].0, w[1].1, w[1].2, n_boot, seed))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn cosine_basics() {
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 0.0]), None);
        assert!((cosine(&[1.0, 1.0], &[2.0, 2.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!(cosine(&[1.0, 0.0], &[0.0, 3.0]).unwrap().abs() < 1e-12);
    }

    #[test]
    fn bootstrap_brackets_mean_and_is_seeded() {
        let v: Vec<f64> = (0..200).map(|i| (i % 17) as f64 / 17.0).collect();
        let a = bootstrap_mean_ci(&v, 500, 0.95, 3);
        let b = bootstrap_mean_ci(&v, 500, 0.95, 3);
        assert_eq!(a, b);
        assert!(a.1 <= a.0 && a.0 <= a.2);
        assert!(a.2 - a.1 > 0.0);
    }

    #[test]
    fn constant_values_give_degenerate_interval() {
        let (m, lo, hi) = bootstrap_mean_ci(&[0.5; 10], 100, 0.95, 0);
        assert_eq!((m, lo, hi), (0.5, 0.5, 0.5));
    }

    #[test]
    fn quantiles() {
        let s = [0.0, 1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&s, 0.5), 2.0);
        assert_eq!(quantile_sorted(&s, 0.0), 0.0);
        assert!((quantile_sorted(&s, 0.125) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn mismatched_streams() {
        let b = RouterBasis::from_orthonormal_rows(Matrix::from_rows(&[[1.0, 0.0]]), vec![1.0]);
        let err = pair_continuity(
            0,
            &b,
            &Matrix::zeros(3, 2),
            1,
            &b,
            &Matrix::zeros(2, 2),
            10,
            0,
        );
        assert_eq!(
            err.unwrap_err(),
            ContinuityError::TokenStreamMismatch { left: 3, right: 2 }
        );
    }

    #[test]
    fn zero_channels_are_counted() {
        let b = RouterBasis::from_orthonormal_rows(Matrix::from_rows(&[[1.0, 0.0]]), vec![1.0]);
        let s = Matrix::from_rows(&[[1.0, 0.0], [1.0, 1.0]]);
        let p = pair_continuity(0, &b, &s, 1, &b, &s, 10, 0).unwrap();
        assert_eq!(p.visible.n_tokens, 2);
        assert_eq!(p.blind.n_tokens, 1);
        assert_eq!(p.blind.n_zero, 1);
        assert!((p.visible.mean - 1.0).abs() < 1e-12);
    }
}
