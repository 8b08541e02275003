use serde::{Deserialize, Serialize};

use super::{ModelConfig, TransformState};
use crate::error::{QuadError, Result};
use crate::linalg::{DenseMatrix, OnlineHadamard};
use crate::quantsim::{QuadLinear, QuantScheme};

/// A linear map `y = x·W` with `W` stored `in × out`.
#[derive(Clone, Debug, PartialEq)]
pub enum Linear {
    Dense(DenseMatrix),
    Quad(Box<QuadLinear>),
}

impl Linear {
    pub fn in_dim(&self) -> usize {
        match self {
            Linear::Dense(w) => w.rows(),
            Linear::Quad(q) => q.in_dim(),
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Linear::Dense(w) => w.cols(),
            Linear::Quad(q) => q.out_dim(),
        }
    }

    pub fn as_dense(&self) -> Option<&DenseMatrix> {
        match self {
            Linear::Dense(w) => Some(w),
            Linear::Quad(_) => None,
        }
    }

    pub fn as_quad(&self) -> Option<&QuadLinear> {
        match self {
            Linear::Quad(q) => Some(q),
            Linear::Dense(_) => None,
        }
    }

    /// Dense weight, or an error naming the layer when it is already quantized.
    pub fn dense(&self, what: &str) -> Result<&DenseMatrix> {
        self.as_dense()
            .ok_or_else(|| QuadError::state(format!("{what} is quantized; expected a dense weight")))
    }

    /// Applies the map to an input that has already passed any online transform.
    pub fn forward_prepared(&self, x: &DenseMatrix, act_clip: f64) -> Result<DenseMatrix> {
        match self {
            Linear::Dense(w) => {
                if x.cols() != w.rows() {
                    return Err(QuadError::dim(format!(
                        "dense layer expects {} inputs, got {}",
                        w.rows(),
                        x.cols()
                    )));
                }
                Ok(x.matmul(w))
            }
            Linear::Quad(q) => q.forward_prepared(x, act_clip),
        }
    }
}

/// The seven projections of a transformer layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearKind {
    Q,
    K,
    V,
    O,
    Up,
    Gate,
    Down,
}

impl LinearKind {
    pub const ALL: [LinearKind; 7] = [
        LinearKind::Q,
        LinearKind::K,
        LinearKind::V,
        LinearKind::O,
        LinearKind::Up,
        LinearKind::Gate,
        LinearKind::Down,
    ];

    /// Matrices that read a module input: W_Q, W_K, W_V, W_up, W_gate.
    pub fn is_u_type(self) -> bool {
        !self.is_d_type()
    }

    /// Matrices that write a module output: W_O, W_down.
    pub fn is_d_type(self) -> bool {
        matches!(self, LinearKind::O | LinearKind::Down)
    }

    pub fn name(self) -> &'static str {
        match self {
            LinearKind::Q => "wq",
            LinearKind::K => "wk",
            LinearKind::V => "wv",
            LinearKind::O => "wo",
            LinearKind::Up => "w_up",
            LinearKind::Gate => "w_gate",
            LinearKind::Down => "w_down",
        }
    }

    /// Activation tap that feeds this matrix.
    pub fn input_tap(self) -> Capture {
        match self {
            LinearKind::Q | LinearKind::K | LinearKind::V => Capture::AttnIn,
            LinearKind::O => Capture::PreWo,
            LinearKind::Up | LinearKind::Gate => Capture::FfnIn,
            LinearKind::Down => Capture::PreWdown,
        }
    }
}

/// Activation tap points of a layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Capture {
    /// Residual stream entering the layer.
    LayerInputs,
    /// Normed input of W_Q/W_K/W_V.
    AttnIn,
    /// Input of W_O after any online transform.
    PreWo,
    /// Normed input of W_up/W_gate.
    FfnIn,
    /// Input of W_down after any online transform.
    PreWdown,
}

impl Capture {
    pub const TAPS: [Capture; 4] = [
        Capture::AttnIn,
        Capture::PreWo,
        Capture::FfnIn,
        Capture::PreWdown,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Capture::LayerInputs => "layer_input",
            Capture::AttnIn => "attn_in",
            Capture::PreWo => "pre_wo",
            Capture::FfnIn => "ffn_in",
            Capture::PreWdown => "pre_wdown",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub w_up: Linear,
    pub w_gate: Linear,
    pub w_down: Linear,
    pub alpha_attn: Vec<f64>,
    pub alpha_ffn: Vec<f64>,
}

impl LayerWeights {
    pub fn linear(&self, kind: LinearKind) -> &Linear {
        match kind {
            LinearKind::Q => &self.wq,
            LinearKind::K => &self.wk,
            LinearKind::V => &self.wv,
            LinearKind::O => &self.wo,
            LinearKind::Up => &self.w_up,
            LinearKind::Gate => &self.w_gate,
            LinearKind::Down => &self.w_down,
        }
    }

    pub fn linear_mut(&mut self, kind: LinearKind) -> &mut Linear {
        match kind {
            LinearKind::Q => &mut self.wq,
            LinearKind::K => &mut self.wk,
            LinearKind::V => &mut self.wv,
            LinearKind::O => &mut self.wo,
            LinearKind::Up => &mut self.w_up,
            LinearKind::Gate => &mut self.w_gate,
            LinearKind::Down => &mut self.w_down,
        }
    }
}

/// Provenance of a projected and rotated model.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformMeta {
    pub rank: usize,
    pub sign_seed: u64,
    /// Singular values of the calibration activations, descending.
    pub sigma: Vec<f64>,
    /// `P·Q`, mapping an original residual row to the transformed one (`h × (r+h)`).
    pub residual_map: DenseMatrix,
}

impl TransformMeta {
    /// `Σ_{i≤r} σᵢ² / Σ σᵢ²`.
    pub fn outlier_energy_fraction(&self) -> f64 {
        energy_fraction(&self.sigma, self.rank)
    }
}

pub fn energy_fraction(sigma: &[f64], r: usize) -> f64 {
    let total: f64 = sigma.iter().map(|s| s * s).sum();
    if r == 0 || total == 0.0 {
        return 0.0;
    }
    let top: f64 = sigma.iter().take(r).map(|s| s * s).sum();
    (top / total).clamp(0.0, 1.0)
}

/// A decoder-only transformer, in original or transformed residual space.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGraph {
    pub config: ModelConfig,
    /// `vocab × residual_dim`.
    pub embedding: DenseMatrix,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f64>,
    /// `residual_dim × vocab`.
    pub lm_head: DenseMatrix,
    pub residual_dim: usize,
    pub transform_state: TransformState,
    /// Online Hadamard operators registered before W_O and W_down.
    pub online_hadamard: bool,
    pub transform_meta: Option<TransformMeta>,
    /// Set once linears are replaced by quantized layers.
    pub quant: Option<QuantScheme>,
}

impl ModelGraph {
    /// Validates shapes against the config and transform state.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let h = c.hidden_size;
        let expected_residual = match self.transform_state {
            TransformState::Transformed { r } => h + r,
            _ => h,
        };
        if self.residual_dim != expected_residual {
            return Err(QuadError::state(format!(
                "residual width {} inconsistent with {:?}",
                self.residual_dim, self.transform_state
            )));
        }
        if self.layers.len() != c.n_layers {
            return Err(QuadError::dim(format!(
                "{} layers for n_layers = {}",
                self.layers.len(),
                c.n_layers
            )));
        }
        let d = self.residual_dim;
        if self.embedding.shape() != (c.vocab_size, d) {
            return Err(QuadError::dim("embedding shape"));
        }
        if self.lm_head.shape() != (d, c.vocab_size) {
            return Err(QuadError::dim("lm_head shape"));
        }
        if self.final_norm.len() != h {
            return Err(QuadError::dim("final_norm length"));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            for kind in LinearKind::ALL {
                let lin = layer.linear(kind);
                let (want_in, want_out) = match kind {
                    LinearKind::Q | LinearKind::K | LinearKind::V => (d, h),
                    LinearKind::O => (h, d),
                    LinearKind::Up | LinearKind::Gate => (d, c.intermediate_size),
                    LinearKind::Down => (c.intermediate_size, d),
                };
                if (lin.in_dim(), lin.out_dim()) != (want_in, want_out) {
                    return Err(QuadError::dim(format!(
                        "layer {i} {} is {}x{}, expected {want_in}x{want_out}",
                        kind.name(),
                        lin.in_dim(),
                        lin.out_dim()
                    )));
                }
            }
            if layer.alpha_attn.len() != h || layer.alpha_ffn.len() != h {
                return Err(QuadError::dim(format!("layer {i} norm scale length")));
            }
        }
        Ok(())
    }

    pub fn is_quantized(&self) -> bool {
        self.quant.is_some()
    }

    /// Activation clip ratio used by quantized layers.
    pub fn act_clip(&self) -> f64 {
        self.quant
            .as_ref()
            .map_or(crate::quantsim::DEFAULT_ACT_CLIP, |q| q.act_clip)
    }

    /// Online operator in front of W_O.
    pub fn attn_online(&self) -> OnlineHadamard {
        if self.online_hadamard {
            OnlineHadamard::CrossHead {
                n_heads: self.config.n_heads,
                head_dim: self.config.head_dim,
            }
        } else {
            OnlineHadamard::None
        }
    }

    /// Online operator in front of W_down.
    pub fn ffn_online(&self) -> OnlineHadamard {
        if self.online_hadamard {
            OnlineHadamard::Full
        } else {
            OnlineHadamard::None
        }
    }

    pub fn online_for(&self, kind: LinearKind) -> OnlineHadamard {
        match kind {
            LinearKind::O => self.attn_online(),
            LinearKind::Down => self.ffn_online(),
            _ => OnlineHadamard::None,
        }
    }

    /// Outlier dims carried by the residual stream.
    pub fn outlier_rank(&self) -> usize {
        match self.transform_state {
            TransformState::Transformed { r } => r,
            _ => 0,
        }
    }
}

/// Folds every RMSNorm scale, together with the `√h` of the RMS, into the
/// U-type weights (and the LM head) that follow it. Afterwards each norm
/// computes `x / ‖x‖₂`.
pub fn absorb_rmsnorm(model: &ModelGraph) -> Result<ModelGraph> {
    if model.transform_state != TransformState::None {
        return Err(QuadError::state(format!(
            "norm scales already absorbed ({:?})",
            model.transform_state
        )));
    }
    if model.is_quantized() {
        return Err(QuadError::state("cannot absorb norms of a quantized model"));
    }
    let h = model.config.hidden_size;
    let root_h = (h as f64).sqrt();
    let fold = |alpha: &[f64], lin: &Linear, what: &str| -> Result<Linear> {
        let factors: Vec<f64> = alpha.iter().map(|a| a * root_h).collect();
        Ok(Linear::Dense(lin.dense(what)?.scale_rows(&factors)))
    };
    let mut out = model.clone();
    for (i, (dst, src)) in out.layers.iter_mut().zip(&model.layers).enumerate() {
        for kind in LinearKind::ALL {
            let alpha = match kind {
                LinearKind::Q | LinearKind::K | LinearKind::V => &src.alpha_attn,
                LinearKind::Up | LinearKind::Gate => &src.alpha_ffn,
                LinearKind::O | LinearKind::Down => continue,
            };
            *dst.linear_mut(kind) = fold(alpha, src.linear(kind), &format!("layer {i} {}", kind.name()))?;
        }
        dst.alpha_attn = vec![1.0; h];
        dst.alpha_ffn = vec![1.0; h];
    }
    let factors: Vec<f64> = model.final_norm.iter().map(|a| a * root_h).collect();
    out.lm_head = model.lm_head.scale_rows(&factors);
    out.final_norm = vec![1.0; h];
    out.transform_state = TransformState::Absorbed;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::seeded_rng;
    use crate::model::{forward_batch, synth_model, SynthSpec};
    use rand::Rng;

    fn seqs() -> Vec<Vec<u32>> {
        vec![vec![1, 4, 9, 16, 25, 2], vec![7, 7, 3]]
    }

    #[test]
    fn absorbing_uniform_alpha_keeps_logits() {
        let mut m = synth_model(&SynthSpec::plain(ModelConfig::tiny(), 1)).unwrap();
        for l in &mut m.layers {
            l.alpha_attn.iter_mut().for_each(|a| *a = 2.0);
            l.alpha_ffn.iter_mut().for_each(|a| *a = 2.0);
        }
        m.final_norm.iter_mut().for_each(|a| *a = 2.0);
        let a = absorb_rmsnorm(&m).unwrap();
        assert_eq!(a.transform_state, TransformState::Absorbed);
        assert!(a.layers.iter().all(|l| l.alpha_attn.iter().all(|v| *v == 1.0)));
        let (x, y) = (forward_batch(&m, &seqs()).unwrap(), forward_batch(&a, &seqs()).unwrap());
        assert!(x.max_abs_diff(&y) <= 1e-9 * x.max_abs());
    }

    #[test]
    fn absorbing_random_alpha_keeps_logits() {
        let mut m = synth_model(&SynthSpec::plain(ModelConfig::tiny(), 2)).unwrap();
        let mut rng = seeded_rng(9);
        for l in &mut m.layers {
            l.alpha_attn.iter_mut().for_each(|a| *a = rng.random_range(0.2..3.0));
            l.alpha_ffn.iter_mut().for_each(|a| *a = rng.random_range(0.2..3.0));
        }
        m.final_norm.iter_mut().for_each(|a| *a = rng.random_range(0.2..3.0));
        let a = absorb_rmsnorm(&m).unwrap();
        let (x, y) = (forward_batch(&m, &seqs()).unwrap(), forward_batch(&a, &seqs()).unwrap());
        assert!(x.max_abs_diff(&y) <= 1e-9 * x.max_abs());
    }

    #[test]
    fn absorbing_twice_is_an_error() {
        let m = synth_model(&SynthSpec::plain(ModelConfig::tiny(), 3)).unwrap();
        let a = absorb_rmsnorm(&m).unwrap();
        assert!(matches!(absorb_rmsnorm(&a), Err(QuadError::State(_))));
    }
}
