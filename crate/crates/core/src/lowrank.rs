//! Low-rank full-precision branch that replaces an online Hadamard transform.
//!
//! With per-channel smoothing `s_i = max|X_i|^{1/4}` and the SVD `sW = UΣVᵀ`,
//! the layer computes `Q(X s⁻¹) Q(W′) + X s⁻¹ L R` where `L = U_{:k}`,
//! `R = Σ_k V_kᵀ` and `W′ = sW − LR`. Without quantization this is exactly `XW`.
//! Works for any input width; no power-of-two requirement.

use crate::error::{QuadError, Result};
use crate::linalg::{svd, DenseMatrix};
use crate::quantsim::{
    dequantize_weight, fake_quant_rows, rtn_quantize_weight, ActBits, Bits, DEFAULT_ACT_CLIP,
};

/// Default branch rank.
pub const DEFAULT_BRANCH_RANK: usize = 16;

/// Lower bound on smoothing factors.
pub const SMOOTH_FLOOR: f64 = 1e-6;

/// Exponent applied to calibration channel maxima.
pub const SMOOTH_EXPONENT: f64 = 0.25;

#[derive(Clone, Debug, PartialEq)]
pub struct LowRankBranch {
    /// Per-input-channel smoothing factors, all positive.
    pub s: Vec<f64>,
    /// Smoothed residual `sW − LR`, `in × out`.
    pub w_prime: DenseMatrix,
    /// `in × k`.
    pub l: DenseMatrix,
    /// `k × out`.
    pub r: DenseMatrix,
}

impl LowRankBranch {
    pub fn rank(&self) -> usize {
        self.l.cols()
    }

    pub fn inv_s(&self) -> Vec<f64> {
        self.s.iter().map(|v| 1.0 / v).collect()
    }

    /// `sW` as rebuilt from the stored parts.
    pub fn smoothed_weight(&self) -> DenseMatrix {
        self.w_prime.add(&self.l.matmul(&self.r))
    }
}

/// Smoothing factors from per-channel calibration maxima.
pub fn smoothing_factors(channel_absmax: &[f64]) -> Vec<f64> {
    channel_absmax
        .iter()
        .map(|m| m.powf(SMOOTH_EXPONENT).max(SMOOTH_FLOOR))
        .collect()
}

/// Column-wise max |X_i| over the rows of `x`.
pub fn channel_absmax(x: &DenseMatrix) -> Vec<f64> {
    let mut m = vec![0.0f64; x.cols()];
    for i in 0..x.rows() {
        for (a, v) in m.iter_mut().zip(x.row(i)) {
            *a = a.max(v.abs());
        }
    }
    m
}

/// Builds the branch from calibration activations.
pub fn build_lowrank_branch(w: &DenseMatrix, calib_x: &DenseMatrix, k: usize) -> Result<LowRankBranch> {
    if calib_x.cols() != w.rows() {
        return Err(QuadError::dim(format!(
            "calibration width {} does not match weight input dim {}",
            calib_x.cols(),
            w.rows()
        )));
    }
    build_lowrank_from_absmax(w, &channel_absmax(calib_x), k)
}

/// Same as [`build_lowrank_branch`] from precomputed channel maxima.
pub fn build_lowrank_from_absmax(w: &DenseMatrix, absmax: &[f64], k: usize) -> Result<LowRankBranch> {
    let (n_in, n_out) = w.shape();
    if absmax.len() != n_in {
        return Err(QuadError::dim(format!(
            "{} channel maxima for {n_in} inputs",
            absmax.len()
        )));
    }
    if k > n_in.min(n_out) {
        return Err(QuadError::range(format!(
            "branch rank {k} exceeds min({n_in}, {n_out})"
        )));
    }
    let s = smoothing_factors(absmax);
    let sw = w.scale_rows(&s);
    let dec = svd(&sw)?;
    let l = dec.u.col_range(0, k);
    let r = dec.vt.row_range(0, k).scale_rows(&dec.sigma[..k]);
    let w_prime = sw.sub(&l.matmul(&r));
    Ok(LowRankBranch { s, w_prime, l, r })
}

/// `Q(X s⁻¹)·Q(W′) + X s⁻¹·L·R`, with per-token activation RTN at `act_bits`
/// (clip 0.9) and per-output-channel weight RTN at `weight_bits`.
pub fn forward_lowrank(
    x: &DenseMatrix,
    branch: &LowRankBranch,
    act_bits: ActBits,
    weight_bits: Option<Bits>,
) -> Result<DenseMatrix> {
    if x.cols() != branch.s.len() {
        return Err(QuadError::dim(format!(
            "input width {} for a branch over {} channels",
            x.cols(),
            branch.s.len()
        )));
    }
    let xs = x.scale_cols(&branch.inv_s());
    let xq = match act_bits.int_bits() {
        Some(b) => fake_quant_rows(&xs, b, DEFAULT_ACT_CLIP)?,
        None => xs.clone(),
    };
    let wq = match weight_bits {
        Some(b) => dequantize_weight(&rtn_quantize_weight(&branch.w_prime, b, 1.0)?),
        None => branch.w_prime.clone(),
    };
    let mut out = xq.matmul(&wq);
    if branch.rank() > 0 {
        out.add_assign(&xs.matmul(&branch.l).matmul(&branch.r));
    }
    Ok(out)
}
