//! Quantization-aware tuning of the outlier slices `W_r` and the weight
//! scales, by layer-wise distillation with analytic gradients.
//!
//! A quantized layer's output splits as `unit·diag(s) + fixed + X_r·W_r`
//! (see [`LinearParts`]). With codes held fixed (straight-through), the loss
//! `‖out − Y‖²_F / B` is a quadratic in `(s, W_r)` with gradients
//! `2·X_rᵀ R / B` and `2·Σ_b unit_{bj} R_{bj} / B`, where `R = out − Y`.
//! `W_r` takes plain gradient steps; scales step in `log s`.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{QuadError, Result};
use crate::linalg::{seeded_rng, DenseMatrix};
use crate::model::{forward_trace, Capture, Linear, LinearKind, ModelGraph};
use crate::quantsim::{LinearParts, QuadLinear, WeightBody};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TuneTargets {
    pub w_r: bool,
    pub u_scales: bool,
    pub d_scales: bool,
}

impl TuneTargets {
    pub fn all() -> Self {
        Self {
            w_r: true,
            u_scales: true,
            d_scales: true,
        }
    }

    pub fn none() -> Self {
        Self {
            w_r: false,
            u_scales: false,
            d_scales: false,
        }
    }

    fn any(&self) -> bool {
        self.w_r || self.u_scales || self.d_scales
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    #[default]
    LayerMse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuneConfig {
    pub steps: usize,
    pub lr: f64,
    pub targets: TuneTargets,
    #[serde(default)]
    pub objective: Objective,
    pub seed: u64,
    /// Tokens per layer fit; a seeded subset is drawn when the calibration
    /// stream is longer. `None` uses every token.
    #[serde(default)]
    pub max_tokens: Option<usize>,
}

impl Default for TuneConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            lr: 1e-2,
            targets: TuneTargets::all(),
            objective: Objective::LayerMse,
            seed: 0,
            max_tokens: None,
        }
    }
}

impl TuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(QuadError::validation("learning rate must be positive"));
        }
        if self.max_tokens == Some(0) {
            return Err(QuadError::validation("max_tokens must be positive"));
        }
        Ok(())
    }
}

/// Loss trajectory of one layer fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerFit {
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// `‖out − Y‖²_F / B` and its gradients in `W_r` and in the weight scales.
pub struct LossGrad {
    pub loss: f64,
    pub w_r: Option<DenseMatrix>,
    pub scales: Option<Vec<f64>>,
}

pub fn loss_and_grads(
    parts: &LinearParts,
    scales: Option<&[f64]>,
    w_r: Option<&DenseMatrix>,
    y: &DenseMatrix,
    layer: &QuadLinear,
) -> LossGrad {
    let out = layer.assemble_with(parts, scales, w_r);
    let resid = out.sub(y);
    let b = y.rows().max(1) as f64;
    let loss = resid.data().iter().map(|v| v * v).sum::<f64>() / b;
    let g_wr = w_r.map(|_| parts.x_r.t_matmul(&resid).scale(2.0 / b));
    let g_s = match (&parts.unit_body, scales) {
        (Some(unit), Some(_)) => {
            let mut g = vec![0.0; unit.cols()];
            for i in 0..unit.rows() {
                for ((gj, u), r) in g.iter_mut().zip(unit.row(i)).zip(resid.row(i)) {
                    *gj += u * r;
                }
            }
            Some(g.into_iter().map(|v| 2.0 * v / b).collect())
        }
        _ => None,
    };
    LossGrad {
        loss,
        w_r: g_wr,
        scales: g_s,
    }
}

/// Gradient descent on `W_r` (U-type only) and the weight scales of one layer.
///
/// `x` is the layer input after any online transform; `y` the teacher output.
pub fn tune_layer(
    layer: &QuadLinear,
    kind: LinearKind,
    x: &DenseMatrix,
    y: &DenseMatrix,
    cfg: &TuneConfig,
    act_clip: f64,
) -> Result<(QuadLinear, LayerFit)> {
    cfg.validate()?;
    if y.shape() != (x.rows(), layer.out_dim()) {
        return Err(QuadError::dim(format!(
            "teacher output is {}x{}, expected {}x{}",
            y.rows(),
            y.cols(),
            x.rows(),
            layer.out_dim()
        )));
    }
    let parts = layer.parts(x, act_clip)?;
    let tune_wr = cfg.targets.w_r && kind.is_u_type() && layer.w_r.is_some();
    let tune_s = if kind.is_u_type() {
        cfg.targets.u_scales
    } else {
        cfg.targets.d_scales
    } && layer.scales().is_some();

    let mut w_r = layer.w_r.clone();
    let mut scales: Option<Vec<f64>> = layer.scales().map(<[f64]>::to_vec);
    let initial = loss_and_grads(&parts, scales.as_deref(), w_r.as_ref(), y, layer).loss;
    let mut fit = LayerFit {
        initial_loss: initial,
        final_loss: initial,
    };
    if cfg.steps == 0 || !(tune_wr || tune_s) {
        return Ok((layer.clone(), fit));
    }
    for step in 0..cfg.steps {
        let g = loss_and_grads(&parts, scales.as_deref(), w_r.as_ref(), y, layer);
        if !g.loss.is_finite() || g.loss > 10.0 * initial.max(f64::MIN_POSITIVE) {
            return Err(QuadError::numerical(format!(
                "tuning diverged at step {step}: loss {:.4e} vs initial {initial:.4e} (lr {}); lower the learning rate",
                g.loss, cfg.lr
            )));
        }
        if tune_wr {
            if let (Some(w), Some(gw)) = (w_r.as_mut(), g.w_r.as_ref()) {
                *w = w.sub(&gw.scale(cfg.lr));
            }
        }
        if tune_s {
            if let (Some(s), Some(gs)) = (scales.as_mut(), g.scales.as_ref()) {
                // descent on log s: the step is relative, so channels of any
                // magnitude share one learning rate and scales stay positive
                for (v, d) in s.iter_mut().zip(gs) {
                    *v *= (-cfg.lr * *v * d).exp();
                }
            }
        }
    }
    fit.final_loss = loss_and_grads(&parts, scales.as_deref(), w_r.as_ref(), y, layer).loss;
    if fit.final_loss > 10.0 * initial.max(f64::MIN_POSITIVE) {
        return Err(QuadError::numerical("tuning diverged on the final step; lower the learning rate"));
    }

    let mut out = layer.clone();
    out.w_r = w_r;
    if let (Some(s), WeightBody::Quantized(q)) = (scales, &layer.body) {
        out.body = WeightBody::Quantized(q.with_scales(s)?);
    }
    Ok((out, fit))
}

/// Per-layer results of a model sweep, in layer then projection order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneSummary {
    pub fits: Vec<(usize, LinearKind, LayerFit)>,
}

/// Tap groups in execution order; each group shares one input.
const GROUPS: [(Capture, &[LinearKind]); 4] = [
    (Capture::AttnIn, &[LinearKind::Q, LinearKind::K, LinearKind::V]),
    (Capture::PreWo, &[LinearKind::O]),
    (Capture::FfnIn, &[LinearKind::Up, LinearKind::Gate]),
    (Capture::PreWdown, &[LinearKind::Down]),
];

/// Sequential layer-wise distillation: each projection of `qmodel`, fed the
/// quantized model's own (already partly tuned) activations, is fitted to
/// the teacher's output of the same projection on the same tokens.
pub fn tune_model(
    qmodel: &ModelGraph,
    teacher: &ModelGraph,
    seqs: &[Vec<u32>],
    cfg: &TuneConfig,
) -> Result<(ModelGraph, TuneSummary)> {
    cfg.validate()?;
    if !qmodel.is_quantized() {
        return Err(QuadError::state("tuning needs a quantized model"));
    }
    if teacher.is_quantized()
        || teacher.residual_dim != qmodel.residual_dim
        || teacher.layers.len() != qmodel.layers.len()
    {
        return Err(QuadError::state("teacher must be the full-precision model the student was quantized from"));
    }
    let mut summary = TuneSummary { fits: Vec::new() };
    if cfg.steps == 0 || !cfg.targets.any() {
        return Ok((qmodel.clone(), summary));
    }
    let teacher_trace = forward_trace(teacher, seqs, &Capture::TAPS)?;
    let n_tokens = teacher_trace.logits.rows();
    let rows: Option<Vec<usize>> = cfg.max_tokens.filter(|&m| m < n_tokens).map(|m| {
        let mut idx: Vec<usize> = (0..n_tokens).collect();
        idx.shuffle(&mut seeded_rng(cfg.seed));
        let mut pick = idx[..m].to_vec();
        pick.sort_unstable();
        pick
    });
    let subset = |m: &DenseMatrix| match &rows {
        Some(r) => m.gather_rows(r),
        None => m.clone(),
    };

    let clip = qmodel.act_clip();
    let mut student = qmodel.clone();
    for l in 0..student.layers.len() {
        for (tap, kinds) in GROUPS {
            let trace = forward_trace(&student, seqs, &[tap])?;
            let x = subset(&trace.taps[&tap][l]);
            let x_teacher = subset(&teacher_trace.taps[&tap][l]);
            for &kind in kinds {
                let what = format!("layer {l} {}", kind.name());
                let y = x_teacher.matmul(teacher.layers[l].linear(kind).dense(&what)?);
                let Linear::Quad(q) = student.layers[l].linear(kind) else {
                    return Err(QuadError::state(format!("{what} is not quantized")));
                };
                let (tuned, fit) =
                    tune_layer(q, kind, &x, &y, cfg, clip).map_err(|e| e.in_stage(&what))?;
                *student.layers[l].linear_mut(kind) = Linear::Quad(Box::new(tuned));
                summary.fits.push((l, kind, fit));
            }
        }
    }
    Ok((student, summary))
}

/// `‖XXᵀgY − X_rX_rᵀgY‖_F / ‖XXᵀgY‖_F` with `X_r = X·U_{:, :r}`.
pub fn grad_approx_error(x: &DenseMatrix, u: &DenseMatrix, r: usize, g_y: &DenseMatrix) -> Result<f64> {
    if u.rows() != x.cols() || r > u.cols() {
        return Err(QuadError::dim(format!(
            "basis {}x{} with rank {r} for activations of width {}",
            u.rows(),
            u.cols(),
            x.cols()
        )));
    }
    if g_y.rows() != x.rows() {
        return Err(QuadError::dim("gradient rows must match activation rows"));
    }
    let x_r = x.matmul(&u.col_range(0, r));
    let full = x.matmul(&x.t_matmul(g_y));
    let approx = x_r.matmul(&x_r.t_matmul(g_y));
    let denom = full.frobenius_norm();
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok(full.sub(&approx).frobenius_norm() / denom)
}

/// `‖XXᵀ − X_BX_Bᵀ‖_F` with `X_B = X·B` for an orthonormal basis block `B`.
pub fn gram_approx_residual(x: &DenseMatrix, basis: &DenseMatrix) -> f64 {
    let xb = x.matmul(basis);
    x.matmul(&x.transpose())
        .sub(&xb.matmul(&xb.transpose()))
        .frobenius_norm()
}

/// `√(Σ_{i>r} σᵢ⁴)`.
pub fn singular_tail(sigma: &[f64], r: usize) -> f64 {
    sigma.iter().skip(r).map(|s| s.powi(4)).sum::<f64>().sqrt()
}
