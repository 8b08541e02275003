//! Weight quantizers: per-output-channel RTN, clip-ratio search and GPTQ.
//!
//! Weights use the `x·W` convention (`W` is `in × out`). Quantized tensors
//! store `Wᵀ`, so each row is one output channel with its own scale.

use super::rtn::{check_clip, quantize_value, row_scale};
use super::{rtn_quantize_rows, Bits, QuantizedTensor};
use crate::error::{QuadError, Result};
use crate::linalg::{cholesky_lower, spd_inverse, DenseMatrix};

/// Relative damping added to the Hessian diagonal.
pub const GPTQ_DAMP: f64 = 0.01;

/// Per-output-channel RTN of an `in × out` weight.
pub fn rtn_quantize_weight(w: &DenseMatrix, bits: Bits, clip: f64) -> Result<QuantizedTensor> {
    rtn_quantize_rows(&w.transpose(), bits, clip)
}

/// Dequantizes a per-output-channel tensor back to `in × out`.
pub fn dequantize_weight(q: &QuantizedTensor) -> DenseMatrix {
    q.dequantize().transpose()
}

/// `tr(Δᵀ G Δ)` with `Δ = W − Ŵ`, i.e. `‖X(W − Ŵ)‖²_F` when `G = XᵀX`.
/// Plain squared Frobenius error when `g` is `None`.
pub fn weighted_error(w: &DenseMatrix, w_hat: &DenseMatrix, g: Option<&DenseMatrix>) -> f64 {
    let delta = w.sub(w_hat);
    match g {
        None => delta.data().iter().map(|v| v * v).sum(),
        Some(g) => {
            let gd = g.matmul(&delta);
            gd.data().iter().zip(delta.data()).map(|(a, b)| a * b).sum()
        }
    }
}

/// Grid ratio minimizing the (optionally Gram-weighted) squared RTN error.
/// Ties resolve to the larger ratio.
pub fn clip_search(
    w: &DenseMatrix,
    grid: &[f64],
    bits: Bits,
    g: Option<&DenseMatrix>,
) -> Result<f64> {
    if grid.is_empty() {
        return Err(QuadError::validation("clip grid is empty"));
    }
    let mut ratios = grid.to_vec();
    ratios.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    let mut best = (f64::INFINITY, ratios[0]);
    for ratio in ratios {
        let q = rtn_quantize_weight(w, bits, ratio)?;
        let err = weighted_error(w, &dequantize_weight(&q), g);
        if err < best.0 {
            best = (err, ratio);
        }
    }
    Ok(best.1)
}

/// GPTQ: quantizes input columns left to right, pushing each column's rounding
/// error onto the not-yet-quantized columns through the upper Cholesky factor
/// of the damped inverse Hessian `(G + λI)⁻¹`, `λ = 0.01 · mean(diag G)`.
///
/// Scales are fixed up front from the original weight rows with `clip`.
pub fn gptq_quantize(
    w: &DenseMatrix,
    g: &DenseMatrix,
    bits: Bits,
    clip: f64,
) -> Result<QuantizedTensor> {
    gptq_quantize_damped(w, g, bits, clip, GPTQ_DAMP)
}

pub fn gptq_quantize_damped(
    w: &DenseMatrix,
    g: &DenseMatrix,
    bits: Bits,
    clip: f64,
    damp: f64,
) -> Result<QuantizedTensor> {
    check_clip(clip)?;
    let (n_in, n_out) = w.shape();
    if g.shape() != (n_in, n_in) {
        return Err(QuadError::dim(format!(
            "GPTQ Hessian is {}x{}, weight has {n_in} inputs",
            g.rows(),
            g.cols()
        )));
    }
    let q_max = bits.q_max();

    let mut h = g.clone();
    h.symmetrize();
    let mean_diag = if n_in == 0 { 0.0 } else { h.trace() / n_in as f64 };
    let lambda = damp * mean_diag;
    for i in 0..n_in {
        let d = h.get(i, i);
        // dead inputs carry no signal; give them unit curvature
        h.set(i, i, if d == 0.0 { 1.0 } else { d + lambda });
    }
    let fail = || {
        QuadError::numerical(format!(
            "Cholesky of the GPTQ Hessian failed with damping {damp}; raise the damping"
        ))
    };
    let h_inv = spd_inverse(&h).ok_or_else(fail)?;
    let upper = cholesky_lower(&h_inv).ok_or_else(fail)?.transpose();

    // work on Wᵀ: rows = output channels, cols = inputs
    let mut wt = w.transpose();
    let scales: Vec<f64> = (0..n_out)
        .map(|j| {
            let m = wt.row(j).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            row_scale(m, clip, q_max)
        })
        .collect();
    let mut codes = vec![0i8; n_out * n_in];
    for i in 0..n_in {
        let d = upper.get(i, i);
        let tail = &upper.row(i)[i + 1..];
        for j in 0..n_out {
            let s = scales[j];
            let row = wt.row_mut(j);
            let q = quantize_value(row[i], s, q_max);
            codes[j * n_in + i] = q;
            let err = (row[i] - q as f64 * s) / d;
            for (v, u) in row[i + 1..].iter_mut().zip(tail) {
                *v -= err * u;
            }
        }
    }
    QuantizedTensor::new(n_out, n_in, codes, scales, bits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::seeded_rng;

    #[test]
    fn identity_hessian_reduces_to_rtn() {
        let mut rng = seeded_rng(7);
        let w = DenseMatrix::gaussian(16, 12, 1.0, &mut rng);
        let g = DenseMatrix::identity(16);
        let a = gptq_quantize(&w, &g, Bits::Int4, 0.9).unwrap();
        let b = rtn_quantize_weight(&w, Bits::Int4, 0.9).unwrap();
        assert_eq!(a.codes(), b.codes());
        assert!(dequantize_weight(&a).max_abs_diff(&dequantize_weight(&b)) < 1e-12);
    }

    #[test]
    fn scalar_weight_matches_rtn() {
        let w = DenseMatrix::new(1, 1, vec![0.37]).unwrap();
        let g = DenseMatrix::new(1, 1, vec![5.0]).unwrap();
        let a = gptq_quantize(&w, &g, Bits::Int4, 1.0).unwrap();
        let b = rtn_quantize_weight(&w, Bits::Int4, 1.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn hessian_shape_is_checked() {
        let w = DenseMatrix::zeros(3, 2);
        assert!(gptq_quantize(&w, &DenseMatrix::identity(2), Bits::Int4, 1.0).is_err());
    }

    #[test]
    fn clip_search_edge_cases() {
        // exactly representable at full range
        let w = DenseMatrix::from_rows(&[vec![7.0, -3.0], vec![1.0, 7.0]]).unwrap();
        assert_eq!(clip_search(&w, &[1.0, 0.9, 0.8], Bits::Int4, None).unwrap(), 1.0);
        assert_eq!(clip_search(&w, &[0.8], Bits::Int4, None).unwrap(), 0.8);
        assert!(clip_search(&w, &[], Bits::Int4, None).is_err());
    }

    #[test]
    fn clip_search_matches_two_point_enumeration() {
        // one output channel with a single extreme entry among many small ones
        let mut col = vec![10.0];
        col.extend((1..32).map(|i| if i % 2 == 0 { 2.0 } else { -2.0 }));
        let w = DenseMatrix::new(32, 1, col).unwrap();
        let err_at = |c: f64| {
            let q = rtn_quantize_weight(&w, Bits::Int4, c).unwrap();
            weighted_error(&w, &dequantize_weight(&q), None)
        };
        let want = if err_at(0.7) < err_at(1.0) { 0.7 } else { 1.0 };
        assert_eq!(want, 0.7, "fixture should favour clipping");
        assert_eq!(clip_search(&w, &[1.0, 0.7], Bits::Int4, None).unwrap(), want);
    }
}
