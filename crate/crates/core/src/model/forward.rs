use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use super::{Capture, LayerWeights, LinearKind, ModelGraph, TransformState};
use crate::error::{QuadError, Result};
use crate::linalg::{seeded_rng, DenseMatrix, OnlineHadamard};

/// Logits plus the activations recorded at the requested taps.
#[derive(Clone, Debug)]
pub struct Trace {
    /// One row per token, sequences stacked in order.
    pub logits: DenseMatrix,
    /// Per tap, one matrix per layer (rows stacked like `logits`).
    pub taps: BTreeMap<Capture, Vec<DenseMatrix>>,
}

/// Logits of a single sequence.
pub fn forward(model: &ModelGraph, tokens: &[u32]) -> Result<DenseMatrix> {
    Ok(forward_trace(model, &[tokens.to_vec()], &[])?.logits)
}

/// Logits of independent sequences, stacked row-wise.
pub fn forward_batch(model: &ModelGraph, seqs: &[Vec<u32>]) -> Result<DenseMatrix> {
    Ok(forward_trace(model, seqs, &[])?.logits)
}

/// Per-layer activations of one sequence at `capture`.
pub fn forward_capture(model: &ModelGraph, tokens: &[u32], capture: Capture) -> Result<Vec<DenseMatrix>> {
    let mut trace = forward_trace(model, &[tokens.to_vec()], &[capture])?;
    Ok(trace.taps.remove(&capture).unwrap_or_default())
}

/// Runs every sequence independently and records the requested taps.
pub fn forward_trace(model: &ModelGraph, seqs: &[Vec<u32>], taps: &[Capture]) -> Result<Trace> {
    let vocab = model.config.vocab_size;
    for seq in seqs {
        if let Some(bad) = seq.iter().find(|&&t| t as usize >= vocab) {
            return Err(QuadError::validation(format!(
                "token id {bad} out of range for vocabulary of {vocab}"
            )));
        }
    }
    let n_layers = model.layers.len();
    let mut rec: BTreeMap<Capture, Vec<Vec<DenseMatrix>>> = taps
        .iter()
        .map(|&c| (c, vec![Vec::new(); n_layers]))
        .collect();
    let mut logits = Vec::with_capacity(seqs.len());
    for seq in seqs {
        logits.push(forward_sequence(model, seq, &mut rec)?);
    }
    let taps = rec
        .into_iter()
        .map(|(c, per_layer)| (c, per_layer.iter().map(|parts| stack(parts, width_of(parts))).collect()))
        .collect();
    Ok(Trace {
        logits: stack(&logits, vocab),
        taps,
    })
}

fn width_of(parts: &[DenseMatrix]) -> usize {
    parts.first().map_or(0, |m| m.cols())
}

fn stack(parts: &[DenseMatrix], cols: usize) -> DenseMatrix {
    let rows = parts.iter().map(|m| m.rows()).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for m in parts {
        data.extend_from_slice(m.data());
    }
    DenseMatrix::new(rows, cols, data).expect("stacked parts share a width")
}

fn record(
    rec: &mut BTreeMap<Capture, Vec<Vec<DenseMatrix>>>,
    tap: Capture,
    layer: usize,
    x: &DenseMatrix,
) {
    if let Some(slot) = rec.get_mut(&tap) {
        slot[layer].push(x.clone());
    }
}

fn forward_sequence(
    model: &ModelGraph,
    tokens: &[u32],
    rec: &mut BTreeMap<Capture, Vec<Vec<DenseMatrix>>>,
) -> Result<DenseMatrix> {
    let idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let mut x = model.embedding.gather_rows(&idx);
    let clip = model.act_clip();
    let attn_online = model.attn_online();
    let ffn_online = model.ffn_online();
    for (l, layer) in model.layers.iter().enumerate() {
        record(rec, Capture::LayerInputs, l, &x);

        let xn = norm_rows(model, &x, &layer.alpha_attn);
        record(rec, Capture::AttnIn, l, &xn);
        let heads = attention(model, layer, &xn, clip)?;
        let heads = apply_online(&attn_online, heads)?;
        record(rec, Capture::PreWo, l, &heads);
        x.add_assign(&layer.wo.forward_prepared(&heads, clip)?);

        let xn = norm_rows(model, &x, &layer.alpha_ffn);
        record(rec, Capture::FfnIn, l, &xn);
        let act = swiglu(layer, &xn, clip)?;
        let act = apply_online(&ffn_online, act)?;
        record(rec, Capture::PreWdown, l, &act);
        x.add_assign(&layer.w_down.forward_prepared(&act, clip)?);
    }
    let xn = norm_rows(model, &x, &model.final_norm);
    Ok(xn.matmul(&model.lm_head))
}

fn apply_online(op: &OnlineHadamard, x: DenseMatrix) -> Result<DenseMatrix> {
    if op.is_none() {
        Ok(x)
    } else {
        op.apply(&x)
    }
}

/// The model's norm on each row of `x`.
///
/// Before absorption this is conventional RMSNorm `α ⊙ x / √(mean(x²) + ε)`.
/// Afterwards it is `x / √(‖x‖² + h·ε)`, which equals `x / ‖x‖` up to the
/// `ε` regularizer and is unchanged by any `P·Q` with `PPᵀ = I`.
pub fn norm_rows(model: &ModelGraph, x: &DenseMatrix, alpha: &[f64]) -> DenseMatrix {
    let h = model.config.hidden_size as f64;
    let eps = model.config.rms_eps;
    let conventional = model.transform_state == TransformState::None;
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let ss: f64 = row.iter().map(|v| v * v).sum();
        let inv = 1.0 / (ss / h + eps).sqrt();
        if conventional {
            for (v, a) in row.iter_mut().zip(alpha) {
                *v *= inv * a;
            }
        } else {
            // (ss/h + eps)·h = ss + h·eps; the √h lives in the weights
            let inv = inv / h.sqrt();
            row.iter_mut().for_each(|v| *v *= inv);
        }
    }
    out
}

fn attention(model: &ModelGraph, layer: &LayerWeights, xn: &DenseMatrix, clip: f64) -> Result<DenseMatrix> {
    let c = &model.config;
    let t = xn.rows();
    let mut q = layer.wq.forward_prepared(xn, clip)?;
    let mut k = layer.wk.forward_prepared(xn, clip)?;
    let v = layer.wv.forward_prepared(xn, clip)?;
    if let Some(theta) = c.rope_theta {
        for pos in 0..t {
            rope_row(q.row_mut(pos), pos, c.n_heads, c.head_dim, theta);
            rope_row(k.row_mut(pos), pos, c.n_heads, c.head_dim, theta);
        }
    }
    let hd = c.head_dim;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut out = DenseMatrix::zeros(t, c.hidden_size);
    let mut weights = vec![0.0; t];
    for head in 0..c.n_heads {
        let off = head * hd;
        for i in 0..t {
            let qi = &q.row(i)[off..off + hd];
            let mut max = f64::NEG_INFINITY;
            for (j, w) in weights.iter_mut().enumerate().take(i + 1) {
                let kj = &k.row(j)[off..off + hd];
                *w = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                max = max.max(*w);
            }
            let mut z = 0.0;
            for w in weights.iter_mut().take(i + 1) {
                *w = (*w - max).exp();
                z += *w;
            }
            let oi = &mut out.row_mut(i)[off..off + hd];
            for (j, w) in weights.iter().enumerate().take(i + 1) {
                let p = w / z;
                for (o, vj) in oi.iter_mut().zip(&v.row(j)[off..off + hd]) {
                    *o += p * vj;
                }
            }
        }
    }
    Ok(out)
}

/// Rotary embedding on one token's concatenated heads (half-split pairing).
fn rope_row(row: &mut [f64], pos: usize, n_heads: usize, head_dim: usize, theta: f64) {
    let half = head_dim / 2;
    for head in 0..n_heads {
        let x = &mut row[head * head_dim..(head + 1) * head_dim];
        for i in 0..half {
            let freq = theta.powf(-2.0 * i as f64 / head_dim as f64);
            let (sin, cos) = (pos as f64 * freq).sin_cos();
            let (a, b) = (x[i], x[i + half]);
            x[i] = a * cos - b * sin;
            x[i + half] = a * sin + b * cos;
        }
    }
}

fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

fn swiglu(layer: &LayerWeights, xn: &DenseMatrix, clip: f64) -> Result<DenseMatrix> {
    let up = layer.w_up.forward_prepared(xn, clip)?;
    let gate = layer.w_gate.forward_prepared(xn, clip)?;
    let mut out = up;
    for (u, g) in out.data_mut().iter_mut().zip(gate.data()) {
        *u *= silu(*g);
    }
    Ok(out)
}

struct KvCache {
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

/// Samples `n_seqs` continuations of length `len` token by token with a
/// key/value cache. The first token of each sequence is uniform; the rest
/// follow `softmax(logits / temperature)`.
pub fn sample_sequences(
    model: &ModelGraph,
    n_seqs: usize,
    len: usize,
    temperature: f64,
    seed: u64,
) -> Result<Vec<Vec<u32>>> {
    if !(temperature > 0.0) {
        return Err(QuadError::validation("sampling temperature must be positive"));
    }
    let mut rng = seeded_rng(seed);
    let vocab = model.config.vocab_size;
    let mut out = Vec::with_capacity(n_seqs);
    for _ in 0..n_seqs {
        let mut seq = Vec::with_capacity(len);
        if len == 0 {
            out.push(seq);
            continue;
        }
        let mut caches: Vec<KvCache> = (0..model.layers.len())
            .map(|_| KvCache { k: Vec::new(), v: Vec::new() })
            .collect();
        let mut tok = rng.random_range(0..vocab) as u32;
        seq.push(tok);
        while seq.len() < len {
            let logits = decode_step(model, &mut caches, tok, seq.len() - 1)?;
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logits.iter().map(|l| ((l - max) / temperature).exp()).collect();
            let dist = WeightedIndex::new(&w)
                .map_err(|e| QuadError::numerical(format!("sampling distribution: {e}")))?;
            tok = dist.sample(&mut rng) as u32;
            seq.push(tok);
        }
        out.push(seq);
    }
    Ok(out)
}

/// Logits for the token at `pos`, extending the caches.
fn decode_step(model: &ModelGraph, caches: &mut [KvCache], tok: u32, pos: usize) -> Result<Vec<f64>> {
    let c = &model.config;
    let clip = model.act_clip();
    let mut x = model.embedding.row_range(tok as usize, tok as usize + 1);
    let hd = c.head_dim;
    let scale = 1.0 / (hd as f64).sqrt();
    for (layer, cache) in model.layers.iter().zip(caches.iter_mut()) {
        let xn = norm_rows(model, &x, &layer.alpha_attn);
        let mut q = layer.wq.forward_prepared(&xn, clip)?;
        let mut k = layer.wk.forward_prepared(&xn, clip)?;
        let v = layer.wv.forward_prepared(&xn, clip)?;
        if let Some(theta) = c.rope_theta {
            rope_row(q.row_mut(0), pos, c.n_heads, hd, theta);
            rope_row(k.row_mut(0), pos, c.n_heads, hd, theta);
        }
        cache.k.push(k.row(0).to_vec());
        cache.v.push(v.row(0).to_vec());
        let mut heads = DenseMatrix::zeros(1, c.hidden_size);
        for head in 0..c.n_heads {
            let off = head * hd;
            let qi = &q.row(0)[off..off + hd];
            let scores: Vec<f64> = cache
                .k
                .iter()
                .map(|kj| scale * qi.iter().zip(&kj[off..off + hd]).map(|(a, b)| a * b).sum::<f64>())
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = e.iter().sum();
            let oi = &mut heads.row_mut(0)[off..off + hd];
            for (w, vj) in e.iter().zip(&cache.v) {
                for (o, val) in oi.iter_mut().zip(&vj[off..off + hd]) {
                    *o += w / z * val;
                }
            }
        }
        let heads = apply_online(&model.attn_online(), heads)?;
        x.add_assign(&layer.wo.forward_prepared(&heads, clip)?);
        let xn = norm_rows(model, &x, &layer.alpha_ffn);
        let act = apply_online(&model.ffn_online(), swiglu(layer, &xn, clip)?)?;
        x.add_assign(&layer.w_down.forward_prepared(&act, clip)?);
    }
    let xn = norm_rows(model, &x, &model.final_norm);
    Ok(xn.matmul(&model.lm_head).row(0).to_vec())
}

impl Trace {
    /// Recorded input of `kind` in `layer`.
    pub fn input(&self, layer: usize, kind: LinearKind) -> Option<&DenseMatrix> {
        self.taps.get(&kind.input_tap()).and_then(|v| v.get(layer))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::synth::{synth_model, SynthSpec};
    use crate::model::{absorb_rmsnorm, ModelConfig};

    fn model(seed: u64, rope: bool) -> ModelGraph {
        let mut config = ModelConfig::tiny();
        if rope {
            config.rope_theta = Some(10_000.0);
        }
        synth_model(&SynthSpec::plain(config, seed)).unwrap()
    }

    #[test]
    fn empty_sequence_gives_empty_logits() {
        let m = model(1, false);
        let y = forward(&m, &[]).unwrap();
        assert_eq!(y.shape(), (0, m.config.vocab_size));
    }

    #[test]
    fn out_of_range_token_is_rejected() {
        let m = model(1, false);
        assert!(matches!(forward(&m, &[0, 32]), Err(QuadError::Validation(_))));
    }

    #[test]
    fn causal_prefix_logits_do_not_depend_on_suffix() {
        let m = model(2, true);
        let a = forward(&m, &[1, 2, 3, 4, 5]).unwrap();
        let b = forward(&m, &[1, 2, 3, 9, 9]).unwrap();
        assert!(a.row_range(0, 3).max_abs_diff(&b.row_range(0, 3)) == 0.0);
        assert!(a.row_range(3, 5).max_abs_diff(&b.row_range(3, 5)) > 0.0);
    }

    #[test]
    fn capture_shapes_and_first_layer_input() {
        let m = model(3, false);
        let toks = [3u32, 1, 4, 1, 5];
        let caps = forward_capture(&m, &toks, Capture::LayerInputs).unwrap();
        assert_eq!(caps.len(), m.config.n_layers);
        assert!(caps.iter().all(|c| c.shape() == (5, m.residual_dim)));
        assert_eq!(caps[0], m.embedding.gather_rows(&[3, 1, 4, 1, 5]));
        let pre = forward_capture(&m, &toks, Capture::PreWdown).unwrap();
        assert_eq!(pre[1].cols(), m.config.intermediate_size);
    }

    #[test]
    fn capture_does_not_change_logits() {
        let m = model(4, false);
        let seqs = vec![vec![1u32, 2, 3], vec![7, 8]];
        let plain = forward_batch(&m, &seqs).unwrap();
        let traced = forward_trace(&m, &seqs, &Capture::TAPS).unwrap();
        assert_eq!(plain, traced.logits);
    }

    #[test]
    fn cached_decoder_matches_full_forward() {
        for rope in [false, true] {
            let m = absorb_rmsnorm(&model(5, rope)).unwrap();
            let seq = sample_sequences(&m, 1, 12, 1.0, 9).unwrap().remove(0);
            let full = forward(&m, &seq).unwrap();
            let mut caches: Vec<KvCache> = (0..m.layers.len())
                .map(|_| KvCache { k: Vec::new(), v: Vec::new() })
                .collect();
            for (pos, &tok) in seq.iter().enumerate() {
                let step = decode_step(&m, &mut caches, tok, pos).unwrap();
                for (a, b) in step.iter().zip(full.row(pos)) {
                    assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()));
                }
            }
        }
    }

    #[test]
    fn sampling_is_seeded() {
        let m = model(6, false);
        let a = sample_sequences(&m, 3, 10, 1.0, 1).unwrap();
        assert_eq!(a, sample_sequences(&m, 3, 10, 1.0, 1).unwrap());
        assert_ne!(a, sample_sequences(&m, 3, 10, 1.0, 2).unwrap());
        assert!(a.iter().all(|s| s.len() == 10));
    }
}
