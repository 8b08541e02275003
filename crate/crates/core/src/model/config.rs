use serde::{Deserialize, Serialize};

use crate::error::{QuadError, Result};

/// Shape of a decoder-only transformer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden_size: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub intermediate_size: usize,
    pub n_layers: usize,
    pub vocab_size: usize,
    pub rms_eps: f64,
    /// Rotary position embedding base; `None` disables positional encoding.
    #[serde(default)]
    pub rope_theta: Option<f64>,
}

impl ModelConfig {
    /// Desk-scale default: h = 128, 4 heads of 32, SwiGLU width 256, 2 layers.
    pub fn desk() -> Self {
        Self {
            hidden_size: 128,
            n_heads: 4,
            head_dim: 32,
            intermediate_size: 256,
            n_layers: 2,
            vocab_size: 256,
            rms_eps: 1e-6,
            rope_theta: None,
        }
    }

    /// Very small config for unit tests.
    pub fn tiny() -> Self {
        Self {
            hidden_size: 16,
            n_heads: 2,
            head_dim: 8,
            intermediate_size: 32,
            n_layers: 2,
            vocab_size: 32,
            rms_eps: 1e-6,
            rope_theta: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden_size", self.hidden_size),
            ("n_heads", self.n_heads),
            ("head_dim", self.head_dim),
            ("intermediate_size", self.intermediate_size),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(QuadError::validation(format!("{name} must be positive")));
        }
        if self.n_heads * self.head_dim != self.hidden_size {
            return Err(QuadError::validation(format!(
                "hidden_size {} != n_heads {} x head_dim {}",
                self.hidden_size, self.n_heads, self.head_dim
            )));
        }
        if !(self.rms_eps >= 0.0 && self.rms_eps.is_finite()) {
            return Err(QuadError::validation("rms_eps must be finite and non-negative"));
        }
        if let Some(theta) = self.rope_theta {
            if !(theta > 0.0) || !self.head_dim.is_multiple_of(2) {
                return Err(QuadError::validation(
                    "rotary embedding needs theta > 0 and an even head_dim",
                ));
            }
        }
        Ok(())
    }
}

/// Where the model sits in the absorb → transform pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum TransformState {
    /// Conventional RMSNorm with learned scales.
    None,
    /// Norm scales folded into weights; norms compute `x / ‖x‖`.
    Absorbed,
    /// Residual stream widened to `h + r` by the projection and rotation.
    Transformed { r: usize },
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        ModelConfig::desk().validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
    }

    #[test]
    fn head_product_is_checked() {
        let mut c = ModelConfig::tiny();
        c.head_dim = 4;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny();
        c.rope_theta = Some(-1.0);
        assert!(c.validate().is_err());
    }
}
