//! Calibration data and Gram-matrix statistics.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{QuadError, Result};
use crate::linalg::{eig_gram, seeded_rng, DenseMatrix};
use crate::model::synth::random_orthonormal;
use crate::model::{forward_trace, Capture, ModelGraph};
use crate::store::{TensorFile, TensorWriter};

/// Running `Σ XᵀX` over calibration batches.
#[derive(Clone, Debug, PartialEq)]
pub struct GramAccumulator {
    dim: usize,
    gram: DenseMatrix,
    token_count: usize,
}

impl GramAccumulator {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            gram: DenseMatrix::zeros(dim, dim),
            token_count: 0,
        }
    }

    pub fn from_parts(gram: DenseMatrix, token_count: usize) -> Result<Self> {
        if gram.rows() != gram.cols() {
            return Err(QuadError::dim("Gram matrix must be square"));
        }
        Ok(Self {
            dim: gram.rows(),
            gram,
            token_count,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn gram(&self) -> &DenseMatrix {
        &self.gram
    }

    pub fn token_count(&self) -> usize {
        self.token_count
    }

    /// `gram += XᵀX`, then re-symmetrized.
    pub fn accumulate(&mut self, x: &DenseMatrix) -> Result<()> {
        if x.cols() != self.dim {
            return Err(QuadError::dim(format!(
                "activation width {} for a {}-dim accumulator",
                x.cols(),
                self.dim
            )));
        }
        self.gram.add_assign(&x.gram());
        self.gram.symmetrize();
        self.token_count += x.rows();
        Ok(())
    }

    pub fn merge(&self, other: &GramAccumulator) -> Result<GramAccumulator> {
        if self.dim != other.dim {
            return Err(QuadError::dim(format!(
                "cannot merge {}-dim and {}-dim accumulators",
                self.dim, other.dim
            )));
        }
        let mut gram = self.gram.add(&other.gram);
        gram.symmetrize();
        Ok(Self {
            dim: self.dim,
            gram,
            token_count: self.token_count + other.token_count,
        })
    }

    /// Eigenvectors of the Gram and the singular values of the stacked
    /// activations (`√` of its eigenvalues), descending.
    pub fn estimate_singular(&self) -> Result<(DenseMatrix, Vec<f64>)> {
        if self.token_count == 0 {
            return Err(QuadError::state("no activations accumulated"));
        }
        if self.token_count < self.dim {
            log::warn!(
                "estimating a {}-dim basis from only {} tokens",
                self.dim,
                self.token_count
            );
        }
        let (u, eig) = eig_gram(&self.gram)?;
        Ok((u, eig.into_iter().map(f64::sqrt).collect()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CalibSource {
    /// Seeded tokens; `synthetic_activations` also uses the outlier fields.
    Synthetic {
        seed: u64,
        #[serde(default)]
        outlier_rank: usize,
        #[serde(default)]
        outlier_gain: f64,
    },
    TokenFile { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibSpec {
    pub source: CalibSource,
    pub n_samples: usize,
    pub seq_len: usize,
}

impl CalibSpec {
    /// Desk default: 32 sequences of 256 tokens.
    pub fn synthetic(seed: u64) -> Self {
        Self {
            source: CalibSource::Synthetic {
                seed,
                outlier_rank: 0,
                outlier_gain: 0.0,
            },
            n_samples: 32,
            seq_len: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 || self.seq_len == 0 {
            return Err(QuadError::validation(
                "calibration needs at least one sample of at least one token",
            ));
        }
        if let CalibSource::Synthetic { outlier_gain, .. } = self.source {
            if !(outlier_gain.is_finite() && outlier_gain >= 0.0) {
                return Err(QuadError::validation("outlier gain must be finite and non-negative"));
            }
        }
        Ok(())
    }

    /// Calibration sequences. Synthetic tokens are uniform over the vocabulary;
    /// a token file contributes its first `n_samples` sequences, truncated to `seq_len`.
    pub fn tokens(&self, vocab: usize) -> Result<Vec<Vec<u32>>> {
        self.validate()?;
        match &self.source {
            CalibSource::Synthetic { seed, .. } => {
                let mut rng = seeded_rng(*seed);
                Ok((0..self.n_samples)
                    .map(|_| (0..self.seq_len).map(|_| rng.random_range(0..vocab) as u32).collect())
                    .collect())
            }
            CalibSource::TokenFile { path } => {
                let file = read_token_file(path)?;
                if file.len() < self.n_samples {
                    return Err(QuadError::validation(format!(
                        "{} holds {} sequences, {} requested",
                        path.display(),
                        file.len(),
                        self.n_samples
                    )));
                }
                Ok(file
                    .into_iter()
                    .take(self.n_samples)
                    .map(|s| s.into_iter().take(self.seq_len).collect())
                    .collect())
            }
        }
    }

    /// Model-free activations: `N(0, 1)` rows plus `outlier_gain · N(0, 1)`
    /// components along `outlier_rank` random orthonormal directions.
    pub fn synthetic_activations(&self, dim: usize) -> Result<DenseMatrix> {
        self.validate()?;
        let CalibSource::Synthetic {
            seed,
            outlier_rank,
            outlier_gain,
        } = self.source
        else {
            return Err(QuadError::validation("synthetic activations need a synthetic source"));
        };
        let mut rng = seeded_rng(seed);
        let n = self.n_samples * self.seq_len;
        let mut x = DenseMatrix::gaussian(n, dim, 1.0, &mut rng);
        let k = outlier_rank.min(dim);
        if k > 0 {
            let dirs = random_orthonormal(dim, k, &mut rng)?;
            let z = DenseMatrix::gaussian(n, k, outlier_gain, &mut rng);
            x.add_assign(&z.matmul(&dirs.transpose()));
        }
        Ok(x)
    }
}

const TOKEN_MAGIC: u32 = u32::from_le_bytes(*b"QTOK");

/// Writes equal-length sequences as little-endian `u32`:
/// `magic, count, seq_len`, then the ids.
pub fn write_token_file(path: &Path, seqs: &[Vec<u32>]) -> Result<()> {
    let seq_len = seqs.first().map_or(0, |s| s.len());
    if seqs.iter().any(|s| s.len() != seq_len) {
        return Err(QuadError::validation("token file sequences must share one length"));
    }
    let count = seqs.len() * seq_len;
    let header = [
        TOKEN_MAGIC,
        u32::try_from(count).map_err(|_| QuadError::validation("too many tokens"))?,
        seq_len as u32,
    ];
    let bytes: Vec<u8> = header
        .iter()
        .chain(seqs.iter().flatten())
        .flat_map(|v| v.to_le_bytes())
        .collect();
    std::fs::write(path, bytes).map_err(|e| QuadError::io(path, e))
}

pub fn read_token_file(path: &Path) -> Result<Vec<Vec<u32>>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| QuadError::io(path, e))?;
    if bytes.len() % 4 != 0 || bytes.len() < 12 {
        return Err(QuadError::format(path, "truncated token file"));
    }
    let words: Vec<u32> = bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4-byte chunk")))
        .collect();
    if words[0] != TOKEN_MAGIC {
        return Err(QuadError::format(path, "bad magic"));
    }
    let (count, seq_len) = (words[1] as usize, words[2] as usize);
    if words.len() - 3 != count || (seq_len == 0 && count > 0) || (seq_len > 0 && count % seq_len != 0) {
        return Err(QuadError::format(
            path,
            format!("header declares {count} tokens in sequences of {seq_len}"),
        ));
    }
    if seq_len == 0 {
        return Ok(Vec::new());
    }
    Ok(words[3..].chunks(seq_len).map(|c| c.to_vec()).collect())
}

/// Gram and per-channel maxima of one activation tap.
#[derive(Clone, Debug, PartialEq)]
pub struct TapStats {
    pub gram: GramAccumulator,
    pub absmax: Vec<f64>,
}

impl TapStats {
    fn new(dim: usize) -> Self {
        Self {
            gram: GramAccumulator::new(dim),
            absmax: vec![0.0; dim],
        }
    }

    fn observe(&mut self, x: &DenseMatrix) -> Result<()> {
        self.gram.accumulate(x)?;
        for i in 0..x.rows() {
            for (m, v) in self.absmax.iter_mut().zip(x.row(i)) {
                *m = m.max(v.abs());
            }
        }
        Ok(())
    }

    fn merge(&self, other: &TapStats) -> Result<TapStats> {
        Ok(TapStats {
            gram: self.gram.merge(&other.gram)?,
            absmax: self
                .absmax
                .iter()
                .zip(&other.absmax)
                .map(|(a, b)| a.max(*b))
                .collect(),
        })
    }
}

/// Which residual-stream basis drives the projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BasisSource {
    /// One accumulator over every layer input.
    #[default]
    Shared,
    /// Inputs of a single layer.
    Layer(usize),
}

impl std::str::FromStr for BasisSource {
    type Err = QuadError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shared" => Ok(BasisSource::Shared),
            _ => s
                .strip_prefix("layer:")
                .and_then(|i| i.parse().ok())
                .map(BasisSource::Layer)
                .ok_or_else(|| QuadError::validation(format!("unknown basis source '{s}' (shared | layer:<i>)"))),
        }
    }
}

/// Statistics of one calibration pass over a model.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationStats {
    /// Over the inputs of all layers.
    pub residual: GramAccumulator,
    /// Per-layer inputs.
    pub layer_inputs: Vec<GramAccumulator>,
    /// Per layer, the four linear-input taps.
    pub taps: Vec<BTreeMap<Capture, TapStats>>,
}

impl CalibrationStats {
    pub fn tap(&self, layer: usize, tap: Capture) -> Result<&TapStats> {
        self.taps
            .get(layer)
            .and_then(|t| t.get(&tap))
            .ok_or_else(|| QuadError::state(format!("no calibration statistics for layer {layer} {}", tap.name())))
    }

    pub fn basis(&self, source: BasisSource) -> Result<(DenseMatrix, Vec<f64>)> {
        match source {
            BasisSource::Shared => self.residual.estimate_singular(),
            BasisSource::Layer(i) => self
                .layer_inputs
                .get(i)
                .ok_or_else(|| QuadError::range(format!("layer {i} out of range")))?
                .estimate_singular(),
        }
    }

    fn merge(&self, other: &CalibrationStats) -> Result<CalibrationStats> {
        let layer_inputs = self
            .layer_inputs
            .iter()
            .zip(&other.layer_inputs)
            .map(|(a, b)| a.merge(b))
            .collect::<Result<_>>()?;
        let taps = self
            .taps
            .iter()
            .zip(&other.taps)
            .map(|(a, b)| {
                a.iter()
                    .map(|(k, v)| Ok((*k, v.merge(&b[k])?)))
                    .collect::<Result<BTreeMap<_, _>>>()
            })
            .collect::<Result<_>>()?;
        Ok(CalibrationStats {
            residual: self.residual.merge(&other.residual)?,
            layer_inputs,
            taps,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = TensorWriter::new();
        w.meta(format!("{{\"tokens\":{}}}", self.residual.token_count));
        w.matrix_f64("residual.gram", self.residual.gram());
        for (i, acc) in self.layer_inputs.iter().enumerate() {
            w.matrix_f64(format!("layer.{i}.input.gram"), acc.gram());
        }
        for (i, taps) in self.taps.iter().enumerate() {
            for (tap, st) in taps {
                w.matrix_f64(format!("layer.{i}.{}.gram", tap.name()), st.gram.gram());
                w.f64(format!("layer.{i}.{}.absmax", tap.name()), &[st.absmax.len()], &st.absmax);
            }
        }
        w.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = TensorFile::open(path)?;
        #[derive(Deserialize)]
        struct Meta {
            tokens: usize,
        }
        let meta: Meta = serde_json::from_str(
            &f.meta()?
                .ok_or_else(|| QuadError::format(path, "missing calibration metadata"))?,
        )?;
        // each layer input is counted once per layer in the shared accumulator
        let mut n_layers = 0;
        while f.contains(&format!("layer.{n_layers}.input.gram")) {
            n_layers += 1;
        }
        let per_layer = meta.tokens.checked_div(n_layers).unwrap_or(0);
        let residual = GramAccumulator::from_parts(f.matrix("residual.gram")?, meta.tokens)?;
        let mut layer_inputs = Vec::with_capacity(n_layers);
        let mut taps = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            layer_inputs.push(GramAccumulator::from_parts(
                f.matrix(&format!("layer.{i}.input.gram"))?,
                per_layer,
            )?);
            let mut map = BTreeMap::new();
            for tap in Capture::TAPS {
                let gram = f.matrix(&format!("layer.{i}.{}.gram", tap.name()))?;
                let absmax = f.vector(&format!("layer.{i}.{}.absmax", tap.name()))?;
                map.insert(
                    tap,
                    TapStats {
                        gram: GramAccumulator::from_parts(gram, per_layer)?,
                        absmax,
                    },
                );
            }
            taps.push(map);
        }
        Ok(Self {
            residual,
            layer_inputs,
            taps,
        })
    }
}

/// Runs the calibration sequences through `model` and gathers every statistic.
///
/// Sequences are processed in parallel and reduced in input order, so the
/// result does not depend on the thread count.
pub fn collect_stats(model: &ModelGraph, seqs: &[Vec<u32>]) -> Result<CalibrationStats> {
    if seqs.is_empty() {
        return Err(QuadError::validation("no calibration sequences"));
    }
    let all_taps = [
        Capture::LayerInputs,
        Capture::AttnIn,
        Capture::PreWo,
        Capture::FfnIn,
        Capture::PreWdown,
    ];
    let partials: Vec<CalibrationStats> = seqs
        .par_iter()
        .map(|seq| {
            let trace = forward_trace(model, std::slice::from_ref(seq), &all_taps)?;
            let mut residual = GramAccumulator::new(model.residual_dim);
            let mut layer_inputs = Vec::new();
            for x in &trace.taps[&Capture::LayerInputs] {
                residual.accumulate(x)?;
                let mut acc = GramAccumulator::new(x.cols());
                acc.accumulate(x)?;
                layer_inputs.push(acc);
            }
            let mut taps = vec![BTreeMap::new(); model.layers.len()];
            for tap in Capture::TAPS {
                for (l, x) in trace.taps[&tap].iter().enumerate() {
                    let mut st = TapStats::new(x.cols());
                    st.observe(x)?;
                    taps[l].insert(tap, st);
                }
            }
            Ok(CalibrationStats {
                residual,
                layer_inputs,
                taps,
            })
        })
        .collect::<Result<_>>()?;
    let mut iter = partials.into_iter();
    let first = iter.next().expect("at least one sequence");
    iter.try_fold(first, |acc, p| acc.merge(&p))
}
