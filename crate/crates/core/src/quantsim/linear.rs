use rayon::prelude::*;

use super::{dequantize_weight, fake_quant_rows, rtn_quantize_rows, ActBits, QuantizedTensor};
use crate::error::{QuadError, Result};
use crate::linalg::{DenseMatrix, OnlineHadamard};

/// Weight of the quantized part of a layer.
#[derive(Clone, Debug, PartialEq)]
pub enum WeightBody {
    /// Per-output-channel codes (`out × in`).
    Quantized(QuantizedTensor),
    /// Full-precision `in × out`, used when weight quantization is disabled.
    Dense(DenseMatrix),
}

impl WeightBody {
    /// `in × out` real-valued view.
    pub fn to_dense(&self) -> DenseMatrix {
        match self {
            WeightBody::Quantized(q) => dequantize_weight(q),
            WeightBody::Dense(w) => w.clone(),
        }
    }

    pub fn in_dim(&self) -> usize {
        match self {
            WeightBody::Quantized(q) => q.cols(),
            WeightBody::Dense(w) => w.rows(),
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            WeightBody::Quantized(q) => q.rows(),
            WeightBody::Dense(w) => w.cols(),
        }
    }
}

/// Smoothing and factors of a low-rank side branch (see [`crate::lowrank`]).
#[derive(Clone, Debug, PartialEq)]
pub struct BranchFactors {
    pub s: Vec<f64>,
    pub l: DenseMatrix,
    pub r: DenseMatrix,
}

/// A linear layer split into a low-bit body over the ordinary input dims and a
/// full-precision slice `W_r` over the leading `outlier_dims` input dims.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadLinear {
    pub outlier_dims: usize,
    pub body: WeightBody,
    /// `outlier_dims × out`; present iff `outlier_dims > 0`.
    pub w_r: Option<DenseMatrix>,
    pub in_bits: ActBits,
    pub online: OnlineHadamard,
    pub lowrank: Option<BranchFactors>,
}

/// Output of a layer separated by trainable parameter.
///
/// `output = unit_body · diag(weight scales) + fixed + x_r · W_r`.
pub struct LinearParts {
    /// Body product with the weight scales factored out; `None` for dense bodies.
    pub unit_body: Option<DenseMatrix>,
    /// Everything that depends on neither the weight scales nor `W_r`.
    pub fixed: DenseMatrix,
    /// Leading outlier columns of the input.
    pub x_r: DenseMatrix,
}

impl QuadLinear {
    pub fn new(
        outlier_dims: usize,
        body: WeightBody,
        w_r: Option<DenseMatrix>,
        in_bits: ActBits,
        online: OnlineHadamard,
        lowrank: Option<BranchFactors>,
    ) -> Result<Self> {
        let out = body.out_dim();
        match (&w_r, outlier_dims) {
            (None, 0) => {}
            (Some(w), r) if r > 0 && w.shape() == (r, out) => {}
            _ => {
                return Err(QuadError::dim(format!(
                    "outlier slice must be {outlier_dims}x{out} when outlier dims are present"
                )))
            }
        }
        if let Some(b) = &lowrank {
            let n = body.in_dim();
            let k = b.l.cols();
            if b.s.len() != n || b.l.rows() != n || b.r.shape() != (k, out) {
                return Err(QuadError::dim("low-rank branch does not match the body"));
            }
            if b.s.iter().any(|v| !(*v > 0.0)) {
                return Err(QuadError::validation("smoothing factors must be positive"));
            }
        }
        Ok(Self {
            outlier_dims,
            body,
            w_r,
            in_bits,
            online,
            lowrank,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.outlier_dims + self.body.in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.body.out_dim()
    }

    /// Weight scales of a quantized body.
    pub fn scales(&self) -> Option<&[f64]> {
        match &self.body {
            WeightBody::Quantized(q) => Some(q.scales()),
            WeightBody::Dense(_) => None,
        }
    }

    /// Full `in × out` weight the layer approximates in exact arithmetic,
    /// with quantized parts dequantized.
    pub fn effective_weight(&self) -> DenseMatrix {
        let mut body = self.body.to_dense();
        if let Some(b) = &self.lowrank {
            body = body.add(&b.l.matmul(&b.r));
            let inv: Vec<f64> = b.s.iter().map(|v| 1.0 / v).collect();
            body = body.scale_rows(&inv);
        }
        match &self.w_r {
            Some(w_r) => w_r.vstack(&body),
            None => body,
        }
    }

    /// Splits the output on an input that has already passed the online transform.
    pub fn parts(&self, x: &DenseMatrix, act_clip: f64) -> Result<LinearParts> {
        if x.cols() != self.in_dim() {
            return Err(QuadError::dim(format!(
                "layer expects {} input dims, got {}",
                self.in_dim(),
                x.cols()
            )));
        }
        let r = self.outlier_dims;
        let x_r = x.col_range(0, r);
        let mut xb = x.col_range(r, x.cols());
        if let Some(b) = &self.lowrank {
            let inv: Vec<f64> = b.s.iter().map(|v| 1.0 / v).collect();
            xb = xb.scale_cols(&inv);
        }
        let (unit_body, mut fixed) = match (&self.body, self.in_bits.int_bits()) {
            (WeightBody::Quantized(wq), Some(ab)) => {
                let xq = rtn_quantize_rows(&xb, ab, act_clip)?;
                let acc = int_gemm(xq.codes(), wq.codes(), xq.rows(), wq.rows(), wq.cols());
                let n_out = wq.rows();
                let unit = DenseMatrix::from_fn(xq.rows(), n_out, |b, j| {
                    acc[b * n_out + j] as f64 * xq.scales()[b]
                });
                (Some(unit), DenseMatrix::zeros(x.rows(), n_out))
            }
            (WeightBody::Quantized(wq), None) => {
                let codes = DenseMatrix::from_fn(wq.cols(), wq.rows(), |k, j| {
                    wq.row_codes(j)[k] as f64
                });
                (
                    Some(xb.matmul(&codes)),
                    DenseMatrix::zeros(x.rows(), wq.rows()),
                )
            }
            (WeightBody::Dense(w), Some(ab)) => (None, fake_quant_rows(&xb, ab, act_clip)?.matmul(w)),
            (WeightBody::Dense(w), None) => (None, xb.matmul(w)),
        };
        if let Some(b) = &self.lowrank {
            if b.l.cols() > 0 {
                fixed.add_assign(&xb.matmul(&b.l).matmul(&b.r));
            }
        }
        Ok(LinearParts {
            unit_body,
            fixed,
            x_r,
        })
    }

    /// Forward on an input that has already passed the online transform.
    pub fn forward_prepared(&self, x: &DenseMatrix, act_clip: f64) -> Result<DenseMatrix> {
        let parts = self.parts(x, act_clip)?;
        Ok(self.assemble(&parts))
    }

    /// Recombines parts with the layer's current scales and outlier slice.
    pub fn assemble(&self, parts: &LinearParts) -> DenseMatrix {
        self.assemble_with(parts, self.scales(), self.w_r.as_ref())
    }

    pub fn assemble_with(
        &self,
        parts: &LinearParts,
        scales: Option<&[f64]>,
        w_r: Option<&DenseMatrix>,
    ) -> DenseMatrix {
        let mut out = parts.fixed.clone();
        if let (Some(unit), Some(s)) = (&parts.unit_body, scales) {
            out.add_assign(&unit.scale_cols(s));
        }
        if let Some(w_r) = w_r {
            out.add_assign(&parts.x_r.matmul(w_r));
        }
        out
    }
}

/// Exact integer product `A·Bᵀ` of row-major `i8` code matrices sharing inner width `k`.
///
/// `|a·b| ≤ 127² · k` fits in `i32` for every width used here.
pub fn int_gemm(a: &[i8], b: &[i8], rows_a: usize, rows_b: usize, k: usize) -> Vec<i32> {
    assert_eq!(a.len(), rows_a * k);
    assert_eq!(b.len(), rows_b * k);
    let mut out = vec![0i32; rows_a * rows_b];
    if rows_b == 0 {
        return out;
    }
    out.par_chunks_mut(rows_b).enumerate().for_each(|(i, row)| {
        let ar = &a[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            let br = &b[j * k..(j + 1) * k];
            *o = ar
                .iter()
                .zip(br)
                .map(|(&x, &y)| x as i32 * y as i32)
                .sum();
        }
    });
    out
}

/// Quantized product: online transform (when flagged), per-token activation
/// quantization of the non-outlier dims, integer GEMM against the weight codes,
/// rescaling by the outer product of scales, plus the full-precision `x_r · W_r`.
pub fn quantized_matmul(x: &DenseMatrix, layer: &QuadLinear, act_clip: f64) -> Result<DenseMatrix> {
    if x.cols() != layer.in_dim() {
        return Err(QuadError::dim(format!(
            "layer expects {} input dims, got {}",
            layer.in_dim(),
            x.cols()
        )));
    }
    let rotated;
    let x = if layer.online.is_none() {
        x
    } else {
        rotated = layer.online.apply(x)?;
        &rotated
    };
    layer.forward_prepared(x, act_clip)
}
