//! Orthonormal Walsh–Hadamard transforms.
//!
//! `H_2 = [[1, 1], [1, -1]] / √2` and `H_{2^n} = H_2 ⊗ H_{2^{n-1}}`. The
//! matrix is symmetric and orthogonal, so applying it twice is the identity
//! and row-vector application `x·H` equals `H·x`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DenseMatrix;
use crate::error::{QuadError, Result};

pub fn is_power_of_two(n: usize) -> bool {
    n != 0 && n & (n - 1) == 0
}

fn check_len(n: usize) -> Result<()> {
    if is_power_of_two(n) {
        Ok(())
    } else {
        Err(QuadError::dim(format!(
            "Walsh-Hadamard transform needs a power-of-two length, got {n}"
        )))
    }
}

/// In-place fast transform, `O(d log d)`.
pub fn walsh_hadamard_in_place(x: &mut [f64]) -> Result<()> {
    let n = x.len();
    check_len(n)?;
    let mut h = 1;
    while h < n {
        for block in x.chunks_mut(2 * h) {
            let (lo, hi) = block.split_at_mut(h);
            for (a, b) in lo.iter_mut().zip(hi.iter_mut()) {
                let (u, v) = (*a, *b);
                *a = u + v;
                *b = u - v;
            }
        }
        h *= 2;
    }
    let norm = 1.0 / (n as f64).sqrt();
    x.iter_mut().for_each(|v| *v *= norm);
    Ok(())
}

/// Returns `H·x` for the orthonormal Walsh–Hadamard matrix of size `x.len()`.
pub fn walsh_hadamard(x: &[f64]) -> Result<Vec<f64>> {
    let mut out = x.to_vec();
    walsh_hadamard_in_place(&mut out)?;
    Ok(out)
}

/// Explicit `d×d` Walsh–Hadamard matrix, entry `(i, j) = (-1)^{popcount(i & j)} / √d`.
pub fn hadamard_matrix(dim: usize) -> Result<DenseMatrix> {
    check_len(dim)?;
    let norm = 1.0 / (dim as f64).sqrt();
    Ok(DenseMatrix::from_fn(dim, dim, |i, j| {
        if (i & j).count_ones() % 2 == 0 {
            norm
        } else {
            -norm
        }
    }))
}

/// Size and sign seed of a randomized Hadamard matrix `H·diag(±1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HadamardSpec {
    pub dim: usize,
    pub sign_seed: u64,
}

impl HadamardSpec {
    pub fn new(dim: usize, sign_seed: u64) -> Result<Self> {
        check_len(dim)?;
        Ok(Self { dim, sign_seed })
    }

    /// Deterministic ±1 diagonal for this seed.
    pub fn signs(&self) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.sign_seed);
        (0..self.dim)
            .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
            .collect()
    }
}

/// `H·D` with `D` the seeded random sign diagonal.
pub fn random_hadamard(spec: HadamardSpec) -> Result<DenseMatrix> {
    check_len(spec.dim)?;
    Ok(hadamard_matrix(spec.dim)?.scale_cols(&spec.signs()))
}

/// Activation-side Hadamard operator inserted in front of a D-type projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OnlineHadamard {
    #[default]
    None,
    /// Full-width transform over every row.
    Full,
    /// Transform across heads at each within-head offset, `H_{n_heads} ⊗ I_{head_dim}`.
    CrossHead { n_heads: usize, head_dim: usize },
}

impl OnlineHadamard {
    pub fn is_none(&self) -> bool {
        matches!(self, OnlineHadamard::None)
    }

    /// Applies the operator to every row of `x` (row-vector convention).
    pub fn apply(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        let mut out = x.clone();
        match *self {
            OnlineHadamard::None => {}
            OnlineHadamard::Full => {
                check_len(x.cols())?;
                for i in 0..out.rows() {
                    walsh_hadamard_in_place(out.row_mut(i))?;
                }
            }
            OnlineHadamard::CrossHead { n_heads, head_dim } => {
                if n_heads * head_dim != x.cols() {
                    return Err(QuadError::dim(format!(
                        "cross-head transform over {n_heads}x{head_dim} applied to width {}",
                        x.cols()
                    )));
                }
                check_len(n_heads)?;
                let mut lane = vec![0.0; n_heads];
                for i in 0..out.rows() {
                    let row = out.row_mut(i);
                    for j in 0..head_dim {
                        for (h, l) in lane.iter_mut().enumerate() {
                            *l = row[h * head_dim + j];
                        }
                        walsh_hadamard_in_place(&mut lane)?;
                        for (h, l) in lane.iter().enumerate() {
                            row[h * head_dim + j] = *l;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Dense matrix `M` with `apply(x) = x·M`, for fusing into weights.
    pub fn matrix(&self, dim: usize) -> Result<DenseMatrix> {
        self.apply(&DenseMatrix::identity(dim))
    }
}

/// Applies `H_block` independently to each contiguous block of `block` columns,
/// i.e. right-multiplies by `I ⊗ H_block`.
pub fn blockwise_hadamard(x: &DenseMatrix, block: usize) -> Result<DenseMatrix> {
    check_len(block)?;
    if !x.cols().is_multiple_of(block) {
        return Err(QuadError::dim(format!(
            "width {} is not a multiple of block {block}",
            x.cols()
        )));
    }
    let mut out = x.clone();
    for i in 0..out.rows() {
        for chunk in out.row_mut(i).chunks_mut(block) {
            walsh_hadamard_in_place(chunk)?;
        }
    }
    Ok(out)
}

/// Incoherence `μ = max|W_ij| · √(mn) / ‖W‖_F`.
pub fn incoherence(w: &DenseMatrix) -> Result<f64> {
    let fro = w.frobenius_norm();
    if fro == 0.0 {
        return Err(QuadError::validation(
            "incoherence is undefined for an all-zero matrix",
        ));
    }
    let mn = (w.rows() * w.cols()) as f64;
    Ok(w.max_abs() * mn.sqrt() / fro)
}
