use serde::{Deserialize, Serialize};

use crate::error::{QuadError, Result};
use crate::linalg::DenseMatrix;

/// Integer code width of a quantized tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Bits {
    Int4,
    Int8,
}

impl Bits {
    /// Largest representable magnitude of the symmetric grid.
    pub fn q_max(self) -> i32 {
        match self {
            Bits::Int4 => 7,
            Bits::Int8 => 127,
        }
    }

    pub fn width(self) -> u8 {
        match self {
            Bits::Int4 => 4,
            Bits::Int8 => 8,
        }
    }
}

impl TryFrom<u8> for Bits {
    type Error = QuadError;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            4 => Ok(Bits::Int4),
            8 => Ok(Bits::Int8),
            other => Err(QuadError::validation(format!(
                "unsupported integer width {other} (expected 4 or 8)"
            ))),
        }
    }
}

impl From<Bits> for u8 {
    fn from(b: Bits) -> u8 {
        b.width()
    }
}

/// Per-row symmetric integer codes plus one real scale per row.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTensor {
    rows: usize,
    cols: usize,
    codes: Vec<i8>,
    scales: Vec<f64>,
    bits: Bits,
}

impl QuantizedTensor {
    pub fn new(
        rows: usize,
        cols: usize,
        codes: Vec<i8>,
        scales: Vec<f64>,
        bits: Bits,
    ) -> Result<Self> {
        if codes.len() != rows * cols || scales.len() != rows {
            return Err(QuadError::dim(format!(
                "quantized {rows}x{cols} tensor got {} codes and {} scales",
                codes.len(),
                scales.len()
            )));
        }
        let q_max = bits.q_max();
        if codes.iter().any(|&c| (c as i32).abs() > q_max) {
            return Err(QuadError::validation(format!(
                "code outside [-{q_max}, {q_max}]"
            )));
        }
        if scales.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(QuadError::validation("scales must be finite and positive"));
        }
        Ok(Self {
            rows,
            cols,
            codes,
            scales,
            bits,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn bits(&self) -> Bits {
        self.bits
    }

    pub fn codes(&self) -> &[i8] {
        &self.codes
    }

    pub fn row_codes(&self, i: usize) -> &[i8] {
        &self.codes[i * self.cols..(i + 1) * self.cols]
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    /// Replaces the scales, keeping codes fixed.
    pub fn with_scales(&self, scales: Vec<f64>) -> Result<Self> {
        Self::new(self.rows, self.cols, self.codes.clone(), scales, self.bits)
    }

    pub fn dequantize(&self) -> DenseMatrix {
        dequantize(self)
    }
}

/// Round half away from zero, then saturate to the symmetric grid.
#[inline]
pub(crate) fn quantize_value(v: f64, scale: f64, q_max: i32) -> i8 {
    let q = (v / scale).round();
    q.clamp(-(q_max as f64), q_max as f64) as i8
}

/// Scale for a row with the given max-abs; all-zero rows get the sentinel 1.
#[inline]
pub(crate) fn row_scale(max_abs: f64, clip: f64, q_max: i32) -> f64 {
    if max_abs == 0.0 {
        1.0
    } else {
        clip * max_abs / q_max as f64
    }
}

pub(crate) fn check_clip(clip: f64) -> Result<()> {
    if clip > 0.0 && clip <= 1.0 {
        Ok(())
    } else {
        Err(QuadError::range(format!("clip ratio {clip} outside (0, 1]")))
    }
}

/// Round-to-nearest quantization of each row with `scale = clip · max|row| / q_max`.
pub fn rtn_quantize_rows(x: &DenseMatrix, bits: Bits, clip: f64) -> Result<QuantizedTensor> {
    check_clip(clip)?;
    if !x.is_finite() {
        return Err(QuadError::validation("cannot quantize non-finite values"));
    }
    let q_max = bits.q_max();
    let mut codes = Vec::with_capacity(x.rows() * x.cols());
    let mut scales = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = x.row(i);
        let m = row.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let s = row_scale(m, clip, q_max);
        scales.push(s);
        codes.extend(row.iter().map(|&v| quantize_value(v, s, q_max)));
    }
    Ok(QuantizedTensor {
        rows: x.rows(),
        cols: x.cols(),
        codes,
        scales,
        bits,
    })
}

pub fn dequantize(qt: &QuantizedTensor) -> DenseMatrix {
    DenseMatrix::from_fn(qt.rows, qt.cols, |i, j| {
        qt.codes[i * qt.cols + j] as f64 * qt.scales[i]
    })
}

/// Quantize-dequantize in one step.
pub fn fake_quant_rows(x: &DenseMatrix, bits: Bits, clip: f64) -> Result<DenseMatrix> {
    Ok(rtn_quantize_rows(x, bits, clip)?.dequantize())
}
