//! Seeded synthetic transformers.
//!
//! Weights start Gaussian with `1/√fan_in` scaling and are then rescaled on
//! a seeded probe batch so that every projection output has unit RMS and the
//! logits have RMS `logit_scale`. An optional outlier
//! injector adds `gain · z · u_k` to every embedding row along `rank` random
//! orthonormal directions `u_k` (with i.i.d. `z ~ N(0,1)`), which gives the
//! residual stream a few dominant singular values. Weights reading the
//! residual stream are damped along those directions by `coupling`, so the
//! ordinary dims still carry most of the signal.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{LayerWeights, Linear, ModelConfig, ModelGraph, TransformState};
use crate::error::Result;
use crate::linalg::{seeded_rng, svd, DenseMatrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutlierSpec {
    pub rank: usize,
    pub gain: f64,
    /// Fraction of each U-type weight kept along the outlier directions.
    #[serde(default = "default_coupling")]
    pub coupling: f64,
}

fn default_coupling() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub config: ModelConfig,
    pub seed: u64,
    #[serde(default)]
    pub outlier: Option<OutlierSpec>,
    /// Norm scales are drawn from `1 ± alpha_jitter`.
    #[serde(default = "default_jitter")]
    pub alpha_jitter: f64,
    /// Target standard deviation of the logits.
    #[serde(default = "default_logit_scale")]
    pub logit_scale: f64,
}

fn default_jitter() -> f64 {
    0.2
}

fn default_logit_scale() -> f64 {
    4.0
}

impl SynthSpec {
    pub fn plain(config: ModelConfig, seed: u64) -> Self {
        Self {
            config,
            seed,
            outlier: None,
            alpha_jitter: default_jitter(),
            logit_scale: default_logit_scale(),
        }
    }

    pub fn with_outliers(config: ModelConfig, seed: u64, rank: usize, gain: f64) -> Self {
        Self {
            outlier: Some(OutlierSpec {
                rank,
                gain,
                coupling: default_coupling(),
            }),
            ..Self::plain(config, seed)
        }
    }
}

/// `rank` random orthonormal columns in `ℝ^dim`, `dim × rank`.
pub fn random_orthonormal<R: Rng + ?Sized>(dim: usize, rank: usize, rng: &mut R) -> Result<DenseMatrix> {
    if rank == 0 {
        return Ok(DenseMatrix::zeros(dim, 0));
    }
    let g = DenseMatrix::gaussian(dim, rank, 1.0, rng);
    Ok(svd(&g)?.u.col_range(0, rank))
}

/// Builds a model in the un-absorbed state.
pub fn synth_model(spec: &SynthSpec) -> Result<ModelGraph> {
    let c = &spec.config;
    c.validate()?;
    let h = c.hidden_size;
    let mut rng = seeded_rng(spec.seed);

    let (dirs, gain, coupling) = match &spec.outlier {
        Some(o) if o.rank > 0 => (random_orthonormal(h, o.rank.min(h), &mut rng)?, o.gain, o.coupling),
        _ => (DenseMatrix::zeros(h, 0), 0.0, 1.0),
    };
    let k = dirs.cols();

    let mut embedding = DenseMatrix::gaussian(c.vocab_size, h, 1.0, &mut rng);
    if k > 0 {
        let z = DenseMatrix::gaussian(c.vocab_size, k, gain, &mut rng);
        embedding.add_assign(&z.matmul(&dirs.transpose()));
    }

    // (I − (1−c)·U Uᵀ) G: damps what a reader sees along the outlier directions
    let damp = |w: DenseMatrix| -> DenseMatrix {
        if k == 0 {
            return w;
        }
        let along = dirs.matmul(&dirs.t_matmul(&w));
        w.sub(&along.scale(1.0 - coupling))
    };
    let reader = |rng: &mut ChaCha8Rng, out: usize| -> Linear {
        Linear::Dense(damp(DenseMatrix::gaussian(h, out, 1.0 / (h as f64).sqrt(), rng)))
    };
    let writer = |rng: &mut ChaCha8Rng, fan_in: usize| -> Linear {
        Linear::Dense(DenseMatrix::gaussian(fan_in, h, 1.0 / (fan_in as f64).sqrt(), rng))
    };
    let alpha = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..h)
            .map(|_| 1.0 + spec.alpha_jitter * rng.random_range(-1.0..=1.0))
            .collect()
    };

    let mut layers = Vec::with_capacity(c.n_layers);
    for _ in 0..c.n_layers {
        let wq = reader(&mut rng, h);
        let wk = reader(&mut rng, h);
        let wv = reader(&mut rng, h);
        let wo = writer(&mut rng, h);
        let w_up = reader(&mut rng, c.intermediate_size);
        let w_gate = reader(&mut rng, c.intermediate_size);
        let w_down = writer(&mut rng, c.intermediate_size);
        let alpha_attn = alpha(&mut rng);
        let alpha_ffn = alpha(&mut rng);
        layers.push(LayerWeights {
            wq,
            wk,
            wv,
            wo,
            w_up,
            w_gate,
            w_down,
            alpha_attn,
            alpha_ffn,
        });
    }
    let final_norm = alpha(&mut rng);
    let lm_head = damp(DenseMatrix::gaussian(
        h,
        c.vocab_size,
        1.0 / (h as f64).sqrt(),
        &mut rng,
    ));

    let mut model = ModelGraph {
        config: c.clone(),
        embedding,
        layers,
        final_norm,
        lm_head,
        residual_dim: h,
        transform_state: TransformState::None,
        online_hadamard: false,
        transform_meta: None,
        quant: None,
    };
    model.validate()?;
    let probe: Vec<Vec<u32>> = (0..PROBE_SEQS)
        .map(|_| (0..PROBE_LEN).map(|_| rng.random_range(0..c.vocab_size) as u32).collect())
        .collect();
    normalize_scales(&mut model, &probe, spec.logit_scale)?;
    Ok(model)
}

const PROBE_SEQS: usize = 4;
const PROBE_LEN: usize = 32;

fn rms(m: &DenseMatrix) -> f64 {
    let n = (m.rows() * m.cols()).max(1) as f64;
    (m.frobenius_norm().powi(2) / n).sqrt()
}

fn rescale(lin: &mut Linear, x: &DenseMatrix, target: f64) {
    let Linear::Dense(w) = lin else {
        unreachable!("synthesis builds dense weights")
    };
    let r = rms(&x.matmul(w));
    if r > 0.0 {
        *w = w.scale(target / r);
    }
}

/// Data-dependent rescaling on a probe batch, layer by layer: every
/// projection output gets unit RMS and the logits get RMS `logit_scale`.
/// Keeps depth from inflating activations regardless of the outlier setup.
fn normalize_scales(model: &mut ModelGraph, probe: &[Vec<u32>], logit_scale: f64) -> Result<()> {
    use super::{forward_trace, Capture, LinearKind};
    for l in 0..model.layers.len() {
        for (tap, kinds) in [
            (Capture::AttnIn, &[LinearKind::Q, LinearKind::K, LinearKind::V][..]),
            (Capture::PreWo, &[LinearKind::O]),
            (Capture::FfnIn, &[LinearKind::Up, LinearKind::Gate]),
            (Capture::PreWdown, &[LinearKind::Down]),
        ] {
            let trace = forward_trace(model, probe, &[tap])?;
            let x = &trace.taps[&tap][l];
            for &kind in kinds {
                rescale(model.layers[l].linear_mut(kind), x, 1.0);
            }
        }
    }
    let logits = forward_trace(model, probe, &[])?.logits;
    let r = rms(&logits);
    if r > 0.0 {
        model.lm_head = model.lm_head.scale(logit_scale / r);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthesis_is_seeded() {
        let spec = SynthSpec::with_outliers(ModelConfig::tiny(), 3, 2, 50.0);
        let a = synth_model(&spec).unwrap();
        assert_eq!(a, synth_model(&spec).unwrap());
        let other = SynthSpec { seed: 4, ..spec };
        assert_ne!(a, synth_model(&other).unwrap());
    }

    #[test]
    fn outliers_dominate_embedding_energy() {
        let spec = SynthSpec::with_outliers(ModelConfig::desk(), 1, 4, 100.0);
        let m = synth_model(&spec).unwrap();
        let dec = svd(&m.embedding).unwrap();
        assert!(dec.sigma[3] > 10.0 * dec.sigma[4]);
    }

    #[test]
    fn orthonormal_directions() {
        let mut rng = seeded_rng(2);
        let u = random_orthonormal(16, 5, &mut rng).unwrap();
        assert!(u.t_matmul(&u).max_abs_diff(&DenseMatrix::identity(5)) < 1e-12);
    }
}
