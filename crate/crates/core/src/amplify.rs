//! Amplification statistics: how strongly router weights concentrate on the
//! hidden dimensions that already carry the most magnitude.

use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::matrix::Matrix;
use crate::probe::{self, ProbeConfig, ProbeError};
use crate::rng::CounterRng;

const RNG_STREAM_DIMS: u64 = 0x4449_4d53; // "DIMS"

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AmplifyError {
    #[error("no tokens in shard")]
    EmptyShard,
    #[error("correlation undefined: one of the vectors is constant")]
    ConstantVector,
    #[error("need at least two paired values, got {0}")]
    TooFewValues(usize),
    #[error("hidden width {states} does not match router width {router}")]
    DimensionMismatch { states: usize, router: usize },
    #[error("fraction {fraction} selects no dimension out of {dims}")]
    InvalidFraction { fraction: f64, dims: usize },
    #[error(transparent)]
    Probe(#[from] ProbeError),
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct MagnitudeProfile {
    /// Mean `|h_d|` over tokens.
    pub h_mag: Vec<f64>,
    /// Mean `|R_{e,d}|` over experts.
    pub r_mag: Vec<f64>,
    pub rho: Option<f64>,
    pub n_tokens: usize,
}

/// Single-pass accumulator for per-dimension mean magnitudes, fed in
/// batches.
#[derive(Debug, Clone)]
pub struct MagnitudeAccumulator {
    sums: Vec<f64>,
    count: usize,
}

impl MagnitudeAccumulator {
    pub fn new(dim: usize) -> Self {
        Self {
            sums: vec![0.0; dim],
            count: 0,
        }
    }

    pub fn push_rows(&mut self, states: &Matrix) {
        assert_eq!(states.cols(), self.sums.len(), "width mismatch");
        for row in states.iter_rows() {
            for (s, &x) in self.sums.iter_mut().zip(row) {
                *s += libm::fabs(x as f64);
            }
        }
        self.count += states.rows();
    }

    pub fn finish(self, router: &Matrix) -> Result<MagnitudeProfile, AmplifyError> {
        if self.count == 0 {
            return Err(AmplifyError::EmptyShard);
        }
        if router.cols() != self.sums.len() {
            return Err(AmplifyError::DimensionMismatch {
                states: self.sums.len(),
                router: router.cols(),
            });
        }
        let n = self.count as f64;
        Ok(MagnitudeProfile {
            h_mag: self.sums.into_iter().map(|s| s / n).collect(),
            r_mag: router_column_magnitudes(router),
            rho: None,
            n_tokens: self.count,
        })
    }
}

/// Mean absolute value of every column of `router`.
pub fn router_column_magnitudes(router: &Matrix) -> Vec<f64> {
    let mut mags = vec![0.0f64; router.cols()];
    for row in router.iter_rows() {
        for (m, &x) in mags.iter_mut().zip(row) {
            *m += libm::fabs(x as f64);
        }
    }
    let n = router.rows().max(1) as f64;
    mags.iter_mut().for_each(|m| *m /= n);
    mags
}

pub fn dim_magnitudes(states: &Matrix, router: &Matrix) -> Result<MagnitudeProfile, AmplifyError> {
    let mut acc = MagnitudeAccumulator::new(states.cols());
    acc.push_rows(states);
    acc.finish(router)
}

/// Pearson correlation with `f64` accumulation.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64, AmplifyError> {
    assert_eq!(a.len(), b.len(), "paired values required");
    let n = a.len();
    if n < 2 {
        return Err(AmplifyError::TooFewValues(n));
    }
    let ma = a.iter().sum::<f64>() / n as f64;
    let mb = b.iter().sum::<f64>() / n as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return Err(AmplifyError::ConstantVector);
    }
    Ok((sab / libm::sqrt(saa * sbb)).clamp(-1.0, 1.0))
}

/// Correlation between `h_mag` and `r_mag`; also stored into `profile.rho`.
pub fn amplification_corr(profile: &mut MagnitudeProfile) -> Result<f64, AmplifyError> {
    let rho = pearson(&profile.h_mag, &profile.r_mag)?;
    profile.rho = Some(rho);
    Ok(rho)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionMode {
    TopMagnitude,
    Random,
}

/// Number of dimensions a fraction selects: `⌈fraction · dims⌉`.
pub fn fraction_count(fraction: f64, dims: usize) -> Result<usize, AmplifyError> {
    let raw = fraction * dims as f64;
    // Absorb binary representation error, e.g. 0.07 * 100.
    let count = libm::ceil(raw - 1e-9 * raw.max(1.0)) as usize;
    if !(fraction > 0.0 && fraction <= 1.0) || count == 0 {
        return Err(AmplifyError::InvalidFraction { fraction, dims });
    }
    Ok(count.min(dims))
}

/// Picks `⌈fraction·D⌉` dimensions: the largest `h_mag` entries (lower index
/// wins ties, returned in rank order) or a seeded uniform sample (returned
/// ascending).
pub fn select_dims(
    profile: &MagnitudeProfile,
    fraction: f64,
    mode: SelectionMode,
    seed: u64,
) -> Result<Vec<usize>, AmplifyError> {
    let d = profile.h_mag.len();
    let count = fraction_count(fraction, d)?;
    Ok(match mode {
        SelectionMode::TopMagnitude => {
            let mut idx: Vec<usize> = (0..d).collect();
            idx.sort_by(|&a, &b| {
                profile.h_mag[b]
                    .total_cmp(&profile.h_mag[a])
                    .then(a.cmp(&b))
            });
            idx.truncate(count);
            idx
        }
        SelectionMode::Random => {
            let mut idx =
                CounterRng::new(seed, RNG_STREAM_DIMS).sample_without_replacement(d, count);
            idx.sort_unstable();
            idx
        }
    })
}

/// Held-out accuracy of a probe that sees only `dims` of `states`.
pub fn subset_probe_accuracy(
    states: &Matrix,
    labels: &[u32],
    dims: &[usize],
    cfg: &ProbeConfig,
) -> Result<f64, AmplifyError> {
    if dims.is_empty() {
        return Err(AmplifyError::InvalidFraction {
            fraction: 0.0,
            dims: states.cols(),
        });
    }
    Ok(probe::probe_accuracy(
        &states.select_cols(dims),
        labels,
        cfg,
    )?)
}

/// Mean accuracy over `draws` random dimension subsets, draw `i` seeded
/// with `seed + i`.
pub fn random_subset_accuracy(
    states: &Matrix,
    labels: &[u32],
    profile: &MagnitudeProfile,
    fraction: f64,
    draws: usize,
    seed: u64,
    cfg: &ProbeConfig,
) -> Result<f64, AmplifyError> {
    let mut total = 0.0;
    for i in 0..draws.max(1) {
        let dims = select_dims(
            profile,
            fraction,
            SelectionMode::Random,
            seed.wrapping_add(i as u64),
        )?;
        total += subset_probe_accuracy(states, labels, &dims, cfg)?;
    }
    Ok(total / draws.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn profile(h: &[f64]) -> MagnitudeProfile {
        MagnitudeProfile {
            h_mag: h.to_vec(),
            r_mag: vec![1.0; h.len()],
            rho: None,
            n_tokens: 1,
        }
    }

    #[test]
    fn single_token_magnitudes() {
        let states = Matrix::from_rows(&[[-2.0, 0.0, 2.0]]);
        let router = Matrix::from_rows(&[[1.0, 1.0, 1.0]]);
        let p = dim_magnitudes(&states, &router).unwrap();
        assert_eq!(p.h_mag, vec![2.0, 0.0, 2.0]);
    }

    #[test]
    fn router_magnitudes_are_column_means() {
        let r = Matrix::from_rows(&[[1.0, -1.0], [3.0, 1.0]]);
        assert_eq!(router_column_magnitudes(&r), vec![2.0, 1.0]);
    }

    #[test]
    fn empty_shard() {
        let acc = MagnitudeAccumulator::new(2);
        assert_eq!(
            acc.finish(&Matrix::zeros(1, 2)),
            Err(AmplifyError::EmptyShard)
        );
    }

    #[test]
    fn perfect_correlations() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(
            pearson(&[1.0, 1.0], &[0.0, 2.0]),
            Err(AmplifyError::ConstantVector)
        );
        assert_eq!(pearson(&[1.0], &[2.0]), Err(AmplifyError::TooFewValues(1)));
    }

    #[test]
    fn corr_stored_in_profile() {
        let mut p = MagnitudeProfile {
            h_mag: vec![1.0, 2.0, 3.0],
            r_mag: vec![2.0, 4.0, 6.5],
            rho: None,
            n_tokens: 3,
        };
        let rho = amplification_corr(&mut p).unwrap();
        assert_eq!(p.rho, Some(rho));
    }

    #[test]
    fn top_magnitude_selection() {
        let p = profile(&[5.0, 1.0, 9.0, 3.0]);
        let dims = select_dims(&p, 0.5, SelectionMode::TopMagnitude, 0).unwrap();
        assert_eq!(dims, vec![2, 0]);
        let all = select_dims(&p, 1.0, SelectionMode::TopMagnitude, 0).unwrap();
        assert_eq!(all.len(), 4);
    }

    #[test]
    fn ties_prefer_lower_index() {
        let p = profile(&[1.0, 2.0, 2.0, 2.0]);
        assert_eq!(
            select_dims(&p, 0.5, SelectionMode::TopMagnitude, 0).unwrap(),
            vec![1, 2]
        );
    }

    #[test]
    fn random_selection_is_seeded() {
        let p = profile(&[0.0; 100]);
        let a = select_dims(&p, 0.1, SelectionMode::Random, 4).unwrap();
        let b = select_dims(&p, 0.1, SelectionMode::Random, 4).unwrap();
        let c = select_dims(&p, 0.1, SelectionMode::Random, 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), 10);
    }

    #[test]
    fn fraction_rounding() {
        assert_eq!(fraction_count(0.02, 1024).unwrap(), 21);
        assert_eq!(fraction_count(0.07, 100).unwrap(), 7);
        assert_eq!(fraction_count(0.5, 4).unwrap(), 2);
        assert!(fraction_count(0.0, 4).is_err());
        assert!(fraction_count(1.5, 4).is_err());
    }
}
