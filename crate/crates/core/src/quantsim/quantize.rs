use rayon::prelude::*;

use super::{
    clip_search, gptq_quantize, ActBits, BranchFactors, QuadLinear, QuantScheme, WeightBody,
};
use crate::calib::CalibrationStats;
use crate::error::{QuadError, Result};
use crate::lowrank::build_lowrank_from_absmax;
use crate::model::{Linear, LinearKind, ModelGraph, TransformState};

/// Replaces every layer projection with a [`QuadLinear`].
///
/// U-type weights keep their first `r` input rows in full precision as `W_r`;
/// the remaining rows and all D-type weights are clip-searched and quantized
/// with GPTQ against the matching sub-block of the input Gram. The embedding
/// and LM head stay in full precision.
pub fn quantize_model(
    model: &ModelGraph,
    scheme: &QuantScheme,
    stats: &CalibrationStats,
) -> Result<ModelGraph> {
    scheme.validate()?;
    if model.is_quantized() {
        return Err(QuadError::state("model is already quantized"));
    }
    let r = match model.transform_state {
        TransformState::Transformed { r } => r,
        TransformState::Absorbed => 0,
        TransformState::None => {
            return Err(QuadError::state(
                "quantization needs an absorbed or transformed model",
            ))
        }
    };
    if scheme.lowrank_rank.is_some() && model.online_hadamard {
        return Err(QuadError::state(
            "the low-rank branch replaces online Hadamard; transform without it",
        ));
    }
    if stats.taps.len() != model.layers.len() {
        return Err(QuadError::state(format!(
            "missing Gram statistics: {} layers calibrated, model has {}",
            stats.taps.len(),
            model.layers.len()
        )));
    }

    let jobs: Vec<(usize, LinearKind)> = (0..model.layers.len())
        .flat_map(|l| LinearKind::ALL.into_iter().map(move |k| (l, k)))
        .collect();
    let built: Vec<QuadLinear> = jobs
        .par_iter()
        .map(|&(l, kind)| quantize_linear(model, scheme, stats, r, l, kind))
        .collect::<Result<_>>()?;

    let mut out = model.clone();
    for ((l, kind), q) in jobs.into_iter().zip(built) {
        *out.layers[l].linear_mut(kind) = Linear::Quad(Box::new(q));
    }
    out.quant = Some(scheme.clone());
    out.validate()?;
    Ok(out)
}

fn quantize_linear(
    model: &ModelGraph,
    scheme: &QuantScheme,
    stats: &CalibrationStats,
    r: usize,
    l: usize,
    kind: LinearKind,
) -> Result<QuadLinear> {
    let what = format!("layer {l} {}", kind.name());
    let w = model.layers[l].linear(kind).dense(&what)?;
    let tap = stats.tap(l, kind.input_tap())?;
    if tap.gram.dim() != w.rows() {
        return Err(QuadError::dim(format!(
            "{what}: Gram is {}-dim for {} inputs",
            tap.gram.dim(),
            w.rows()
        )));
    }
    let in_bits = scheme.act_bits_for(kind);
    let outlier_dims = if kind.is_u_type() { r } else { 0 };
    let n_in = w.rows();
    let w_body = w.row_range(outlier_dims, n_in);
    let mut gram = tap.gram.gram().principal_block(outlier_dims, n_in);
    let w_r = (outlier_dims > 0).then(|| w.row_range(0, outlier_dims));

    let mut lowrank = None;
    let target = match scheme.lowrank_rank {
        Some(k) if kind.is_d_type() => {
            let branch = build_lowrank_from_absmax(&w_body, &tap.absmax, k)?;
            // the body sees x·s⁻¹, whose Gram is S⁻¹ G S⁻¹
            let inv = branch.inv_s();
            gram = gram.scale_rows(&inv).scale_cols(&inv);
            lowrank = Some(BranchFactors {
                s: branch.s,
                l: branch.l,
                r: branch.r,
            });
            branch.w_prime
        }
        _ => w_body,
    };
    let body = match scheme.weight_bits {
        Some(bits) => {
            let clip = clip_search(&target, &scheme.weight_clip_grid, bits, Some(&gram))?;
            WeightBody::Quantized(gptq_quantize(&target, &gram, bits, clip).map_err(|e| e.in_stage(&what))?)
        }
        None => WeightBody::Dense(target),
    };
    QuadLinear::new(outlier_dims, body, w_r, in_bits, model.online_for(kind), lowrank)
}

/// Isolated error of one quantized projection on full-precision inputs.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LayerError {
    pub layer: usize,
    pub kind: LinearKind,
    /// `‖y_q − y‖_F / ‖y‖_F`.
    pub rel_error: f64,
}

/// Per-projection relative output error of `quantized` against `reference`
/// (the same model before quantization), both fed the reference's activations.
pub fn layer_errors(
    reference: &ModelGraph,
    quantized: &ModelGraph,
    seqs: &[Vec<u32>],
) -> Result<Vec<LayerError>> {
    if reference.layers.len() != quantized.layers.len() || reference.residual_dim != quantized.residual_dim {
        return Err(QuadError::dim("reference and quantized models differ in shape"));
    }
    let trace = crate::model::forward_trace(reference, seqs, &crate::model::Capture::TAPS)?;
    let clip = quantized.act_clip();
    let mut out = Vec::new();
    for l in 0..reference.layers.len() {
        for kind in LinearKind::ALL {
            let x = trace.input(l, kind).expect("all taps recorded");
            let what = format!("layer {l} {}", kind.name());
            let y = x.matmul(reference.layers[l].linear(kind).dense(&what)?);
            let yq = quantized.layers[l].linear(kind).forward_prepared(x, clip)?;
            let denom = y.frobenius_norm();
            let num = yq.sub(&y).frobenius_norm();
            out.push(LayerError {
                layer: l,
                kind,
                rel_error: if denom == 0.0 { num } else { num / denom },
            });
        }
    }
    Ok(out)
}

pub fn mean_layer_error(errors: &[LayerError]) -> f64 {
    if errors.is_empty() {
        return 0.0;
    }
    errors.iter().map(|e| e.rel_error).sum::<f64>() / errors.len() as f64
}

impl QuantScheme {
    /// Activation width at the input of `kind`.
    pub fn act_bits_for(&self, kind: LinearKind) -> ActBits {
        if kind.is_u_type() {
            self.u_act_bits
        } else {
            self.d_act_bits
        }
    }
}
