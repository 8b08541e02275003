//! Outlier projection `P`, block rotation `Q`, and their fusion into a model.
//!
//! With `M = P·Q` (`h × (h+r)`) and `M·Mᵀ = I_h`, every residual row `x`
//! becomes `x·M`. Readers of the residual stream (U-type weights and the LM
//! head) become `Mᵀ·W`; writers become `T·W·M`, where `T` is the transpose of
//! whatever online transform now precedes them. Norms are unaffected because
//! `‖x·M‖ = ‖x‖`.

use serde::{Deserialize, Serialize};

use crate::error::{QuadError, Result};
use crate::linalg::{
    blockwise_hadamard, is_power_of_two, random_hadamard, DenseMatrix, HadamardSpec, OnlineHadamard,
};
use crate::model::{
    absorb_rmsnorm, forward_batch, forward_trace, Capture, Linear, LinearKind,
    ModelGraph, TransformMeta, TransformState,
};

/// Tolerance for accepting a basis as orthonormal.
const ORTHONORMAL_TOL: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionTransform {
    pub h: usize,
    pub r: usize,
    /// Leading `r` basis vectors, `h × r`.
    pub u_top: DenseMatrix,
    /// `(U_top, I − U_top U_topᵀ)`, `h × (r+h)`.
    pub p: DenseMatrix,
    pub sigma: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RotationTransform {
    pub r: usize,
    pub h: usize,
    /// `diag(I_r, H·D)`.
    pub q: DenseMatrix,
    pub sign_seed: u64,
}

pub fn build_projection(u: &DenseMatrix, sigma: &[f64], r: usize) -> Result<ProjectionTransform> {
    let h = u.rows();
    if u.cols() != h {
        return Err(QuadError::dim(format!("basis is {}x{}, expected square", h, u.cols())));
    }
    if r > h {
        return Err(QuadError::range(format!("rank {r} exceeds hidden size {h}")));
    }
    let defect = u.t_matmul(u).max_abs_diff(&DenseMatrix::identity(h));
    if defect > ORTHONORMAL_TOL {
        return Err(QuadError::validation(format!(
            "basis is not orthonormal (max |UᵀU − I| = {defect:.3e})"
        )));
    }
    let u_top = u.col_range(0, r);
    let complement = DenseMatrix::identity(h).sub(&u_top.matmul(&u_top.transpose()));
    let p = u_top.hstack(&complement);
    Ok(ProjectionTransform {
        h,
        r,
        u_top,
        p,
        sigma: sigma.to_vec(),
    })
}

impl RotationTransform {
    /// `diag(I_r, block)` for an explicit orthogonal `block`.
    pub fn with_block(r: usize, block: &DenseMatrix, sign_seed: u64) -> Result<Self> {
        let h = block.rows();
        if block.cols() != h {
            return Err(QuadError::dim("rotation block must be square"));
        }
        let n = r + h;
        let q = DenseMatrix::from_fn(n, n, |i, j| {
            if i < r || j < r {
                if i == j {
                    1.0
                } else {
                    0.0
                }
            } else {
                block.get(i - r, j - r)
            }
        });
        Ok(Self { r, h, q, sign_seed })
    }

    /// `Q = I`, for isolating the projection.
    pub fn identity(r: usize, h: usize) -> Self {
        Self {
            r,
            h,
            q: DenseMatrix::identity(r + h),
            sign_seed: 0,
        }
    }
}

/// Block rotation with a seeded random Hadamard on the ordinary dims.
pub fn build_rotation(r: usize, h: usize, sign_seed: u64) -> Result<RotationTransform> {
    if !is_power_of_two(h) {
        return Err(QuadError::validation(format!(
            "hidden size {h} is not a power of two; use the low-rank branch (lowrank module) instead of Hadamard rotation"
        )));
    }
    let block = random_hadamard(HadamardSpec::new(h, sign_seed)?)?;
    RotationTransform::with_block(r, &block, sign_seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformOptions {
    /// Register online Hadamard operators before W_O and W_down and fuse
    /// their inverses into the weights.
    pub online_hadamard: bool,
}

impl Default for TransformOptions {
    fn default() -> Self {
        Self {
            online_hadamard: true,
        }
    }
}

/// Per-weight fusion matrices for one model/transform pair.
struct Fusion {
    /// `P·Q`.
    m: DenseMatrix,
    /// Right factor on W_V (`I ⊗ H_head`), when online transforms are on.
    v_right: Option<DenseMatrix>,
    /// Transform in front of W_O (`(I ⊗ H_head)·(H_heads ⊗ I)`) and W_down.
    t_o: Option<DenseMatrix>,
    t_down: Option<DenseMatrix>,
}

impl Fusion {
    fn new(model: &ModelGraph, m: DenseMatrix, online: bool) -> Result<Self> {
        if !online {
            return Ok(Self {
                m,
                v_right: None,
                t_o: None,
                t_down: None,
            });
        }
        let c = &model.config;
        for (name, v) in [
            ("head_dim", c.head_dim),
            ("n_heads", c.n_heads),
            ("intermediate_size", c.intermediate_size),
        ] {
            if !is_power_of_two(v) {
                return Err(QuadError::validation(format!(
                    "online Hadamard needs a power-of-two {name}, got {v}; use the low-rank branch instead"
                )));
            }
        }
        let h = c.hidden_size;
        let v_right = blockwise_hadamard(&DenseMatrix::identity(h), c.head_dim)?;
        let cross = OnlineHadamard::CrossHead {
            n_heads: c.n_heads,
            head_dim: c.head_dim,
        }
        .matrix(h)?;
        let t_o = v_right.matmul(&cross);
        let t_down = OnlineHadamard::Full.matrix(c.intermediate_size)?;
        Ok(Self {
            m,
            v_right: Some(v_right),
            t_o: Some(t_o),
            t_down: Some(t_down),
        })
    }

    fn writer_left(&self, kind: LinearKind) -> Option<&DenseMatrix> {
        match kind {
            LinearKind::O => self.t_o.as_ref(),
            LinearKind::Down => self.t_down.as_ref(),
            _ => None,
        }
    }

    fn fuse(&self, kind: LinearKind, w: &DenseMatrix) -> DenseMatrix {
        if kind.is_u_type() {
            let out = self.m.t_matmul(w);
            match (kind, &self.v_right) {
                (LinearKind::V, Some(b)) => out.matmul(b),
                _ => out,
            }
        } else {
            let left = match self.writer_left(kind) {
                Some(t) => t.t_matmul(w),
                None => w.clone(),
            };
            left.matmul(&self.m)
        }
    }

    /// Undoes `fuse`; uses only `M·Mᵀ = I` and the orthogonality of the transforms.
    fn unfuse(&self, kind: LinearKind, w_t: &DenseMatrix) -> DenseMatrix {
        if kind.is_u_type() {
            let w = match (kind, &self.v_right) {
                (LinearKind::V, Some(b)) => w_t.matmul(&b.transpose()),
                _ => w_t.clone(),
            };
            self.m.matmul(&w)
        } else {
            let w = w_t.matmul(&self.m.transpose());
            match self.writer_left(kind) {
                Some(t) => t.matmul(&w),
                None => w,
            }
        }
    }
}

/// Fuses `P·Q` and the online-transform inverses into an absorbed model.
pub fn apply_transform(
    model: &ModelGraph,
    proj: &ProjectionTransform,
    rot: &RotationTransform,
    opts: TransformOptions,
) -> Result<ModelGraph> {
    if model.transform_state != TransformState::Absorbed {
        return Err(QuadError::state(format!(
            "transform needs an absorbed model, found {:?}",
            model.transform_state
        )));
    }
    if model.is_quantized() {
        return Err(QuadError::state("cannot transform a quantized model"));
    }
    let h = model.config.hidden_size;
    if proj.h != h || rot.h != h || rot.r != proj.r {
        return Err(QuadError::dim(format!(
            "transform sized for h = {}, r = {} (rotation h = {}, r = {}) on a model with h = {h}",
            proj.h, proj.r, rot.h, rot.r
        )));
    }
    let m = proj.p.matmul(&rot.q);
    let fusion = Fusion::new(model, m, opts.online_hadamard)?;

    let mut out = model.clone();
    for (i, layer) in out.layers.iter_mut().enumerate() {
        for kind in LinearKind::ALL {
            let w = model.layers[i]
                .linear(kind)
                .dense(&format!("layer {i} {}", kind.name()))?;
            *layer.linear_mut(kind) = Linear::Dense(fusion.fuse(kind, w));
        }
    }
    out.embedding = model.embedding.matmul(&fusion.m);
    out.lm_head = fusion.m.t_matmul(&model.lm_head);
    out.residual_dim = h + proj.r;
    out.transform_state = TransformState::Transformed { r: proj.r };
    out.online_hadamard = opts.online_hadamard;
    out.transform_meta = Some(TransformMeta {
        rank: proj.r,
        sign_seed: rot.sign_seed,
        sigma: proj.sigma.clone(),
        residual_map: fusion.m,
    });
    out.validate()?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformReport {
    /// `max |Δlogits| / max |logits|` of the transformed against the original model.
    pub equivalence_deviation: f64,
    /// `Σ_{i≤r} σᵢ² / Σ σᵢ²`.
    pub outlier_energy_fraction: f64,
    /// Per layer, the largest `max |W − unfuse(W_t)|` over the seven weights.
    pub fusion_residual: Vec<f64>,
}

/// `max |a − b| / max |a|`, or the absolute deviation when `a` is all zero.
pub fn relative_deviation(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
    let diff = a.max_abs_diff(b);
    let scale = a.max_abs();
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Compares logits and, when `transformed` carries transform metadata,
/// re-derives every original weight from the fused one.
pub fn equivalence_report(
    original: &ModelGraph,
    transformed: &ModelGraph,
    seqs: &[Vec<u32>],
) -> Result<TransformReport> {
    let a = forward_batch(original, seqs)?;
    let b = forward_batch(transformed, seqs)?;
    let equivalence_deviation = relative_deviation(&a, &b);

    let (outlier_energy_fraction, fusion_residual) = match &transformed.transform_meta {
        Some(meta) if !transformed.is_quantized() => {
            let base = match original.transform_state {
                TransformState::None => absorb_rmsnorm(original)?,
                _ => original.clone(),
            };
            let fusion = Fusion::new(&base, meta.residual_map.clone(), transformed.online_hadamard)?;
            let mut residuals = Vec::with_capacity(base.layers.len());
            for (i, (lo, lt)) in base.layers.iter().zip(&transformed.layers).enumerate() {
                let mut worst = 0.0f64;
                for kind in LinearKind::ALL {
                    let what = format!("layer {i} {}", kind.name());
                    let w = lo.linear(kind).dense(&what)?;
                    let back = fusion.unfuse(kind, lt.linear(kind).dense(&what)?);
                    worst = worst.max(w.max_abs_diff(&back));
                }
                residuals.push(worst);
            }
            (meta.outlier_energy_fraction(), residuals)
        }
        Some(meta) => (meta.outlier_energy_fraction(), Vec::new()),
        None => (0.0, Vec::new()),
    };
    Ok(TransformReport {
        equivalence_deviation,
        outlier_energy_fraction,
        fusion_residual,
    })
}

/// Fraction of (layer, token) pairs whose max |activation| over the ordinary
/// residual dims of `transformed` is strictly smaller than over all dims of `original`.
pub fn suppression_fraction(original: &ModelGraph, transformed: &ModelGraph, seqs: &[Vec<u32>]) -> Result<f64> {
    let r = transformed.outlier_rank();
    let before = forward_trace(original, seqs, &[Capture::LayerInputs])?;
    let after = forward_trace(transformed, seqs, &[Capture::LayerInputs])?;
    let (mut wins, mut total) = (0usize, 0usize);
    for (xo, xt) in before.taps[&Capture::LayerInputs]
        .iter()
        .zip(&after.taps[&Capture::LayerInputs])
    {
        for t in 0..xo.rows() {
            let mo = xo.row(t).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let mt = xt.row(t)[r..].iter().fold(0.0f64, |m, v| m.max(v.abs()));
            wins += usize::from(mt < mo);
            total += 1;
        }
    }
    if total == 0 {
        return Err(QuadError::validation("no tokens to compare"));
    }
    Ok(wins as f64 / total as f64)
}
