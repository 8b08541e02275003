use super::{dequantize_weight, fake_quant_rows, rtn_quantize_weight, Bits};
use crate::error::{QuadError, Result};
use crate::linalg::DenseMatrix;
use crate::model::{forward_batch, ModelGraph};

/// `exp` of the mean next-token negative log-likelihood over all sequences.
pub fn eval_perplexity(model: &ModelGraph, seqs: &[Vec<u32>]) -> Result<f64> {
    let n_pred: usize = seqs.iter().map(|s| s.len().saturating_sub(1)).sum();
    if n_pred == 0 {
        return Err(QuadError::validation(
            "perplexity needs at least one sequence of two or more tokens",
        ));
    }
    let logits = forward_batch(model, seqs)?;
    let mut nll = 0.0;
    let mut row = 0;
    for seq in seqs {
        for t in 0..seq.len() {
            if t + 1 < seq.len() {
                nll -= log_softmax_at(logits.row(row), seq[t + 1] as usize);
            }
            row += 1;
        }
    }
    let ppl = (nll / n_pred as f64).exp();
    if !ppl.is_finite() {
        return Err(QuadError::numerical("perplexity is not finite"));
    }
    Ok(ppl)
}

fn log_softmax_at(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln() + max;
    logits[target] - lse
}

/// Settings of `Q(·)` in `E(X, W) = ‖XW − Q(X)Q(W)‖_F`.
/// `None` widths leave that operand unquantized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quantizer {
    pub act_bits: Option<Bits>,
    pub act_clip: f64,
    pub weight_bits: Option<Bits>,
    pub weight_clip: f64,
}

impl Quantizer {
    pub fn w4a4() -> Self {
        Self {
            act_bits: Some(Bits::Int4),
            act_clip: 1.0,
            weight_bits: Some(Bits::Int4),
            weight_clip: 1.0,
        }
    }

    /// Per-token RTN of activations.
    pub fn quantize_x(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        match self.act_bits {
            Some(b) => fake_quant_rows(x, b, self.act_clip),
            None => Ok(x.clone()),
        }
    }

    /// Per-output-channel RTN of an `in × out` weight.
    pub fn quantize_w(&self, w: &DenseMatrix) -> Result<DenseMatrix> {
        match self.weight_bits {
            Some(b) => Ok(dequantize_weight(&rtn_quantize_weight(w, b, self.weight_clip)?)),
            None => Ok(w.clone()),
        }
    }
}

fn check_shapes(x: &DenseMatrix, w: &DenseMatrix) -> Result<()> {
    if x.cols() != w.rows() {
        return Err(QuadError::dim(format!(
            "cannot multiply {}x{} by {}x{}",
            x.rows(),
            x.cols(),
            w.rows(),
            w.cols()
        )));
    }
    Ok(())
}

/// `‖XW − Q(X)Q(W)‖_F`.
pub fn quant_error(x: &DenseMatrix, w: &DenseMatrix, q: &Quantizer) -> Result<f64> {
    check_shapes(x, w)?;
    let qx = q.quantize_x(x)?;
    let qw = q.quantize_w(w)?;
    Ok(x.matmul(w).sub(&qx.matmul(&qw)).frobenius_norm())
}

/// Right-hand side of `E ≤ ‖X‖‖W − Q(W)‖ + ‖X − Q(X)‖‖Q(W)‖` (Frobenius norms).
pub fn quant_error_bound(x: &DenseMatrix, w: &DenseMatrix, q: &Quantizer) -> Result<f64> {
    check_shapes(x, w)?;
    let qx = q.quantize_x(x)?;
    let qw = q.quantize_w(w)?;
    Ok(x.frobenius_norm() * w.sub(&qw).frobenius_norm()
        + x.sub(&qx).frobenius_norm() * qw.frobenius_norm())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::seeded_rng;
    use crate::model::{synth_model, ModelConfig, SynthSpec};

    #[test]
    fn uniform_logits_give_vocab_perplexity() {
        let mut m = synth_model(&SynthSpec::plain(ModelConfig::tiny(), 1)).unwrap();
        m.lm_head = DenseMatrix::zeros(16, 32);
        let ppl = eval_perplexity(&m, &[vec![1, 2, 3, 4], vec![5, 6]]).unwrap();
        assert!((ppl - 32.0).abs() < 1e-9);
        assert!(eval_perplexity(&m, &[vec![1]]).is_err());
        assert!(eval_perplexity(&m, &[]).is_err());
    }

    #[test]
    fn representable_operands_have_zero_error() {
        let x = DenseMatrix::from_rows(&[vec![7.0, -3.0, 1.0], vec![0.0, 7.0, 7.0]]).unwrap();
        let w = DenseMatrix::from_rows(&[vec![7.0, 1.0], vec![-7.0, 2.0], vec![0.0, -7.0]]).unwrap();
        assert_eq!(quant_error(&x, &w, &Quantizer::w4a4()).unwrap(), 0.0);
    }

    #[test]
    fn error_is_bounded() {
        let mut rng = seeded_rng(3);
        let x = DenseMatrix::gaussian(9, 12, 1.0, &mut rng);
        let w = DenseMatrix::gaussian(12, 5, 1.0, &mut rng);
        let q = Quantizer { act_clip: 0.9, ..Quantizer::w4a4() };
        let e = quant_error(&x, &w, &q).unwrap();
        assert!(e > 0.0 && e <= quant_error_bound(&x, &w, &q).unwrap());
        assert!(quant_error(&x, &x, &q).is_err());
    }
}
