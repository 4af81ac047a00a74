//! Router-visible / router-blind decomposition of hidden states.
//!
//! A router scores experts with a linear map `s = R·h`, so it can only react
//! to the part of `h` lying in the row space of `R`. [`router_basis`] finds an
//! orthonormal basis `V` of that row space from the SVD of `R`; the projector
//! `P = V·Vᵀ` splits every hidden state into `h_vis = P·h` and
//! `h_blind = (I − P)·h`, with `R·h_blind = 0`.

use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::matrix::Matrix;

/// Default relative singular-value cutoff.
pub const DEFAULT_SV_CUTOFF: f64 = 1e-6;

const JACOBI_TOL: f64 = 1e-13;
const MAX_SWEEPS: usize = 80;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DecompError {
    #[error("every singular value of the routing matrix is below the cutoff")]
    DegenerateRouter,
    #[error("routing matrix has non-finite entries")]
    NonFinite,
    #[error("singular value cutoff {0} is outside (0, 1)")]
    InvalidCutoff(f64),
    #[error("expected dimension {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Orthonormal basis of a routing matrix's row space.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterBasis {
    /// `r × D`, row `i` is the right-singular vector for `singular_values[i]`.
    basis: Matrix,
    singular_values: Vec<f64>,
}

/// Which part of a hidden state an analysis reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Channel {
    #[cfg_attr(feature = "serde", serde(rename = "vis"))]
    Visible,
    Blind,
    Full,
}

impl Channel {
    pub const ALL: [Channel; 3] = [Channel::Visible, Channel::Blind, Channel::Full];

    pub fn name(self) -> &'static str {
        match self {
            Channel::Visible => "vis",
            Channel::Blind => "blind",
            Channel::Full => "full",
        }
    }
}

impl core::str::FromStr for Channel {
    type Err = &'static str;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "vis" | "visible" => Ok(Channel::Visible),
            "blind" => Ok(Channel::Blind),
            "full" => Ok(Channel::Full),
            _ => Err("expected one of vis, blind, full"),
        }
    }
}

/// A hidden state split into orthogonal components.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelPair {
    pub visible: Vec<f32>,
    pub blind: Vec<f32>,
}

/// Row-wise split of a batch of hidden states.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchChannels {
    pub visible: Matrix,
    pub blind: Matrix,
}

/// SVD-based row-space basis of `router` (`N × D`, one row per expert).
///
/// Right-singular vectors whose singular value exceeds `sv_cutoff · σ₁` are
/// kept. The SVD is a one-sided Jacobi iteration on the rows in `f64`: plane
/// rotations are applied until the rows are mutually orthogonal, at which
/// point their norms are the singular values and their directions the
/// right-singular vectors.
pub fn router_basis(router: &Matrix, sv_cutoff: f64) -> Result<RouterBasis, DecompError> {
    if !(sv_cutoff > 0.0 && sv_cutoff < 1.0) {
        return Err(DecompError::InvalidCutoff(sv_cutoff));
    }
    if !router.is_finite() {
        return Err(DecompError::NonFinite);
    }
    let (n, d) = (router.rows(), router.cols());
    if n == 0 || d == 0 {
        return Err(DecompError::DegenerateRouter);
    }

    let mut rows: Vec<f64> = router.as_slice().iter().map(|&x| x as f64).collect();
    jacobi_orthogonalize_rows(&mut rows, n, d);

    let mut order: Vec<(f64, usize)> = (0..n)
        .map(|i| (libm::sqrt(sq_norm(&rows[i * d..(i + 1) * d])), i))
        .collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

    let sigma_max = order[0].0;
    if !(sigma_max > 0.0) {
        return Err(DecompError::DegenerateRouter);
    }
    let keep: Vec<(f64, usize)> = order
        .into_iter()
        .take(d.min(n))
        .filter(|(s, _)| *s > sv_cutoff * sigma_max)
        .collect();
    if keep.is_empty() {
        return Err(DecompError::DegenerateRouter);
    }

    let mut basis = Matrix::zeros(keep.len(), d);
    for (k, &(s, i)) in keep.iter().enumerate() {
        let src = &rows[i * d..(i + 1) * d];
        for (dst, x) in basis.row_mut(k).iter_mut().zip(src) {
            *dst = (x / s) as f32;
        }
    }
    Ok(RouterBasis {
        basis,
        singular_values: keep.into_iter().map(|(s, _)| s).collect(),
    })
}

fn sq_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

fn jacobi_orthogonalize_rows(rows: &mut [f64], n: usize, d: usize) {
    let scale = (0..n)
        .map(|i| sq_norm(&rows[i * d..(i + 1) * d]))
        .fold(0.0, f64::max);
    if scale == 0.0 {
        return;
    }
    // Rows this small relative to the largest are numerically zero.
    let negligible = scale * 1e-30;
    let mut norms = vec![0.0f64; n];

    for _ in 0..MAX_SWEEPS {
        for (i, nrm) in norms.iter_mut().enumerate() {
            *nrm = sq_norm(&rows[i * d..(i + 1) * d]);
        }
        let mut rotated = false;
        for i in 0..n {
            for j in (i + 1)..n {
                let (alpha, beta) = (norms[i], norms[j]);
                if alpha < negligible || beta < negligible {
                    continue;
                }
                let (head, tail) = rows.split_at_mut(j * d);
                let ri = &mut head[i * d..(i + 1) * d];
                let rj = &mut tail[..d];
                let gamma: f64 = ri.iter().zip(rj.iter()).map(|(a, b)| a * b).sum();
                if libm::fabs(gamma) <= JACOBI_TOL * libm::sqrt(alpha * beta) {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t =
                    libm::copysign(1.0, zeta) / (libm::fabs(zeta) + libm::sqrt(1.0 + zeta * zeta));
                let c = 1.0 / libm::sqrt(1.0 + t * t);
                let s = c * t;
                for (a, b) in ri.iter_mut().zip(rj.iter_mut()) {
                    let (x, y) = (*a, *b);
                    *a = c * x - s * y;
                    *b = s * x + c * y;
                }
                norms[i] = alpha - t * gamma;
                norms[j] = beta + t * gamma;
            }
        }
        if !rotated {
            break;
        }
    }
}

impl RouterBasis {
    /// Builds a basis from rows that are already orthonormal.
    pub fn from_orthonormal_rows(basis: Matrix, singular_values: Vec<f64>) -> Self {
        assert_eq!(basis.rows(), singular_values.len());
        Self {
            basis,
            singular_values,
        }
    }

    pub fn rank(&self) -> usize {
        self.basis.rows()
    }

    pub fn dim(&self) -> usize {
        self.basis.cols()
    }

    /// Retained singular values, non-increasing.
    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }

    /// `r × D`; rows are the retained right-singular vectors.
    pub fn basis_rows(&self) -> &Matrix {
        &self.basis
    }

    /// `D × r` matrix `V`.
    pub fn v(&self) -> Matrix {
        self.basis.transpose()
    }

    /// Materializes `P = V·Vᵀ` (`D × D`).
    pub fn projector(&self) -> Matrix {
        let d = self.dim();
        let mut p = vec![0.0f64; d * d];
        for v in self.basis.iter_rows() {
            for (a, &va) in v.iter().enumerate() {
                if va == 0.0 {
                    continue;
                }
                let va = va as f64;
                let row = &mut p[a * d..(a + 1) * d];
                for (dst, &vb) in row.iter_mut().zip(v) {
                    *dst += va * vb as f64;
                }
            }
        }
        Matrix::from_vec(d, d, p.into_iter().map(|x| x as f32).collect()).expect("square buffer")
    }

    fn check_dim(&self, got: usize) -> Result<(), DecompError> {
        if got != self.dim() {
            return Err(DecompError::DimensionMismatch {
                expected: self.dim(),
                got,
            });
        }
        Ok(())
    }

    /// Projects rows of `states` (row-major, `D` columns) into `visible` and
    /// `blind`. Computed as `C = H·V` then `H_vis = C·Vᵀ` without forming
    /// `P`, with `f64` intermediates.
    fn split_rows(&self, states: &[f32], visible: &mut [f32], blind: &mut [f32]) {
        let d = self.dim();
        let r = self.rank();
        if r == d {
            visible.copy_from_slice(states);
            blind.iter_mut().for_each(|x| *x = 0.0);
            return;
        }
        let mut coeff = vec![0.0f64; r];
        let mut acc = vec![0.0f64; d];
        for ((h, vis), bl) in states
            .chunks_exact(d)
            .zip(visible.chunks_exact_mut(d))
            .zip(blind.chunks_exact_mut(d))
        {
            for (c, v) in coeff.iter_mut().zip(self.basis.iter_rows()) {
                *c = crate::matrix::dot(v, h);
            }
            acc.iter_mut().for_each(|a| *a = 0.0);
            for (&c, v) in coeff.iter().zip(self.basis.iter_rows()) {
                for (a, &x) in acc.iter_mut().zip(v) {
                    *a += c * x as f64;
                }
            }
            for (((&a, &x), o_vis), o_bl) in
                acc.iter().zip(h).zip(vis.iter_mut()).zip(bl.iter_mut())
            {
                *o_vis = a as f32;
                *o_bl = (x as f64 - a) as f32;
            }
        }
    }

    pub fn decompose(&self, h: &[f32]) -> Result<ChannelPair, DecompError> {
        self.check_dim(h.len())?;
        let mut visible = vec![0.0; h.len()];
        let mut blind = vec![0.0; h.len()];
        self.split_rows(h, &mut visible, &mut blind);
        Ok(ChannelPair { visible, blind })
    }

    pub fn batch_decompose(&self, states: &Matrix) -> Result<BatchChannels, DecompError> {
        self.check_dim(states.cols())?;
        let mut visible = Matrix::zeros(states.rows(), states.cols());
        let mut blind = Matrix::zeros(states.rows(), states.cols());
        self.split_rows(
            states.as_slice(),
            visible.as_mut_slice(),
            blind.as_mut_slice(),
        );
        Ok(BatchChannels { visible, blind })
    }

    /// The requested channel of every row of `states`.
    pub fn channel(&self, states: &Matrix, channel: Channel) -> Result<Matrix, DecompError> {
        match channel {
            Channel::Full => {
                self.check_dim(states.cols())?;
                Ok(states.clone())
            }
            Channel::Visible => Ok(self.batch_decompose(states)?.visible),
            Channel::Blind => Ok(self.batch_decompose(states)?.blind),
        }
    }
}

/// Free-function form of [`RouterBasis::decompose`].
pub fn decompose(basis: &RouterBasis, h: &[f32]) -> Result<ChannelPair, DecompError> {
    basis.decompose(h)
}

/// Free-function form of [`RouterBasis::batch_decompose`].
pub fn batch_decompose(basis: &RouterBasis, states: &Matrix) -> Result<BatchChannels, DecompError> {
    basis.batch_decompose(states)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = CounterRng::new(seed, 0);
        Matrix::from_vec(rows, cols, rng.normal_vec(rows * cols)).unwrap()
    }

    #[test]
    fn axis_aligned_rows() {
        let r = Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        let b = router_basis(&r, DEFAULT_SV_CUTOFF).unwrap();
        assert_eq!(b.rank(), 2);
        let p = b.projector();
        let expect = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        for (x, e) in p.as_slice().iter().zip(expect) {
            assert!((x - e).abs() < 1e-6);
        }
        let pair = b.decompose(&[3.0, 4.0, 5.0]).unwrap();
        assert_eq!(pair.visible, vec![3.0, 4.0, 0.0]);
        assert_eq!(pair.blind, vec![0.0, 0.0, 5.0]);
    }

    #[test]
    fn collinear_rows_have_rank_one() {
        let r = Matrix::from_rows(&[[1.0, 0.0], [2.0, 0.0]]);
        let b = router_basis(&r, DEFAULT_SV_CUTOFF).unwrap();
        assert_eq!(b.rank(), 1);
        let p = b.projector();
        assert!((p.get(0, 0) - 1.0).abs() < 1e-6);
        assert!(p.get(0, 1).abs() < 1e-6 && p.get(1, 1).abs() < 1e-6);
        assert!((b.singular_values()[0] - 5f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn zero_router_is_degenerate() {
        let r = Matrix::zeros(3, 4);
        assert_eq!(router_basis(&r, 1e-6), Err(DecompError::DegenerateRouter));
    }

    #[test]
    fn rejects_bad_cutoff_and_nan() {
        let r = Matrix::from_rows(&[[1.0, 0.0]]);
        assert!(matches!(
            router_basis(&r, 0.0),
            Err(DecompError::InvalidCutoff(_))
        ));
        assert!(matches!(
            router_basis(&r, 1.0),
            Err(DecompError::InvalidCutoff(_))
        ));
        let bad = Matrix::from_rows(&[[f32::NAN, 0.0]]);
        assert_eq!(router_basis(&bad, 1e-6), Err(DecompError::NonFinite));
    }

    #[test]
    fn zero_state_splits_to_zeros() {
        let b = router_basis(&random_matrix(4, 9, 1), 1e-6).unwrap();
        let pair = b.decompose(&[0.0; 9]).unwrap();
        assert!(pair.visible.iter().chain(&pair.blind).all(|&x| x == 0.0));
    }

    #[test]
    fn dimension_mismatch() {
        let b = router_basis(&random_matrix(2, 5, 2), 1e-6).unwrap();
        assert_eq!(
            b.decompose(&[1.0; 4]),
            Err(DecompError::DimensionMismatch {
                expected: 5,
                got: 4
            })
        );
        assert!(b.batch_decompose(&Matrix::zeros(3, 6)).is_err());
    }

    #[test]
    fn singular_values_descending_and_orthonormal() {
        let r = random_matrix(8, 16, 3);
        let b = router_basis(&r, 1e-6).unwrap();
        assert_eq!(b.rank(), 8);
        assert!(b.singular_values().windows(2).all(|w| w[0] >= w[1]));
        let v = b.basis_rows();
        for i in 0..8 {
            for j in 0..8 {
                let g = crate::matrix::dot(v.row(i), v.row(j));
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((g - e).abs() < 1e-5, "{i} {j} {g}");
            }
        }
    }

    #[test]
    fn more_experts_than_dims() {
        let r = random_matrix(12, 5, 4);
        let b = router_basis(&r, 1e-6).unwrap();
        assert_eq!(b.rank(), 5);
        let pair = b.decompose(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(pair.blind, vec![0.0; 5]);
    }

    #[test]
    fn batch_scaling_is_linear() {
        let b = router_basis(&random_matrix(3, 8, 5), 1e-6).unwrap();
        let h: Vec<f32> = (0..8).map(|i| i as f32 - 3.5).collect();
        let h2: Vec<f32> = h.iter().map(|x| 2.0 * x).collect();
        let out = b
            .batch_decompose(&Matrix::from_rows(&[h.clone(), h2]))
            .unwrap();
        for j in 0..8 {
            assert_eq!(out.visible.get(1, j), 2.0 * out.visible.get(0, j));
            assert_eq!(out.blind.get(1, j), 2.0 * out.blind.get(0, j));
        }
        let single = b.decompose(&h).unwrap();
        assert_eq!(out.visible.row(0), &single.visible[..]);
    }
}
