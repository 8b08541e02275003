use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::Bits;
use crate::error::{QuadError, Result};

/// Activation precision at a linear-layer input. `Full` disables activation quantization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum ActBits {
    Int4,
    Int8,
    Full,
}

impl ActBits {
    pub fn int_bits(self) -> Option<Bits> {
        match self {
            ActBits::Int4 => Some(Bits::Int4),
            ActBits::Int8 => Some(Bits::Int8),
            ActBits::Full => None,
        }
    }
}

impl TryFrom<u8> for ActBits {
    type Error = QuadError;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            4 => Ok(ActBits::Int4),
            8 => Ok(ActBits::Int8),
            16 => Ok(ActBits::Full),
            other => Err(QuadError::validation(format!(
                "unsupported activation width {other} (expected 4, 8 or 16)"
            ))),
        }
    }
}

impl From<ActBits> for u8 {
    fn from(b: ActBits) -> u8 {
        match b {
            ActBits::Int4 => 4,
            ActBits::Int8 => 8,
            ActBits::Full => 16,
        }
    }
}

/// Default linear-search grid for weight clipping ratios.
pub const DEFAULT_WEIGHT_CLIP_GRID: [f64; 7] = [1.0, 0.95, 0.9, 0.85, 0.8, 0.75, 0.7];

/// Default activation clipping ratio.
pub const DEFAULT_ACT_CLIP: f64 = 0.9;

fn default_kv_bits() -> u8 {
    16
}

/// Whole-model quantization recipe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantScheme {
    /// Inputs of W_Q, W_K, W_V, W_up, W_gate.
    pub u_act_bits: ActBits,
    /// Inputs of W_O and W_down.
    pub d_act_bits: ActBits,
    /// `None` keeps weights in full precision.
    pub weight_bits: Option<Bits>,
    pub act_clip: f64,
    pub weight_clip_grid: Vec<f64>,
    /// Keys and values are never quantized; recorded for the report.
    #[serde(default = "default_kv_bits")]
    pub kv_bits: u8,
    /// Replace online Hadamard sites by a low-rank branch of this rank.
    #[serde(default)]
    pub lowrank_rank: Option<usize>,
}

impl QuantScheme {
    fn preset(u: ActBits, d: ActBits, w: Option<Bits>) -> Self {
        Self {
            u_act_bits: u,
            d_act_bits: d,
            weight_bits: w,
            act_clip: DEFAULT_ACT_CLIP,
            weight_clip_grid: DEFAULT_WEIGHT_CLIP_GRID.to_vec(),
            kv_bits: 16,
            lowrank_rank: None,
        }
    }

    pub fn w4a4() -> Self {
        Self::preset(ActBits::Int4, ActBits::Int4, Some(Bits::Int4))
    }

    pub fn w4a8() -> Self {
        Self::preset(ActBits::Int8, ActBits::Int8, Some(Bits::Int4))
    }

    /// 4-bit U-type inputs, 8-bit D-type inputs.
    pub fn w4a4a8() -> Self {
        Self::preset(ActBits::Int4, ActBits::Int8, Some(Bits::Int4))
    }

    /// No quantization at all.
    pub fn full_precision() -> Self {
        Self::preset(ActBits::Full, ActBits::Full, None)
    }

    pub fn with_lowrank(mut self, rank: usize) -> Self {
        self.lowrank_rank = Some(rank);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.act_clip > 0.0 && self.act_clip <= 1.0) {
            return Err(QuadError::validation(format!(
                "act_clip {} outside (0, 1]",
                self.act_clip
            )));
        }
        if self.weight_clip_grid.is_empty() {
            return Err(QuadError::validation("weight clip grid is empty"));
        }
        if let Some(bad) = self
            .weight_clip_grid
            .iter()
            .find(|c| !(**c > 0.0 && **c <= 1.0))
        {
            return Err(QuadError::validation(format!(
                "weight clip ratio {bad} outside (0, 1]"
            )));
        }
        if self.kv_bits != 16 {
            return Err(QuadError::validation(
                "key/value quantization is not supported; kv_bits must be 16",
            ));
        }
        Ok(())
    }

    /// Short label such as `w4a4a8` or `w4a4a8+lr16`.
    pub fn label(&self) -> String {
        let w = self.weight_bits.map_or(16, |b| b.width());
        let u: u8 = self.u_act_bits.into();
        let d: u8 = self.d_act_bits.into();
        let mut s = if u == d {
            format!("w{w}a{u}")
        } else {
            format!("w{w}a{u}a{d}")
        };
        if let Some(k) = self.lowrank_rank {
            s.push_str(&format!("+lr{k}"));
        }
        s
    }
}

impl fmt::Display for QuantScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for QuantScheme {
    type Err = QuadError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['/', '-', '_'], "").as_str() {
            "w4a4" => Ok(Self::w4a4()),
            "w4a8" => Ok(Self::w4a8()),
            "w4a4a8" => Ok(Self::w4a4a8()),
            "fp" | "w16a16" | "none" => Ok(Self::full_precision()),
            _ => Err(QuadError::validation(format!(
                "unknown scheme '{s}' (expected w4a4, w4a8, w4a4a8 or fp)"
            ))),
        }
    }
}
