//! Model directories: `model.safetensors` (all tensors, little-endian),
//! `config.json` (shape) and, for transformed models, `transform.json`.
//!
//! Real tensors are stored as F64 and integer codes as I8, so a save/load
//! round trip reproduces the model exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LayerWeights, Linear, LinearKind, ModelConfig, ModelGraph, TransformMeta, TransformState};
use crate::error::{QuadError, Result};
use crate::linalg::DenseMatrix;
use crate::quantsim::{BranchFactors, QuadLinear, QuantScheme, QuantizedTensor, WeightBody};
use crate::store::{TensorFile, TensorWriter};

pub const WEIGHTS_FILE: &str = "model.safetensors";
pub const CONFIG_FILE: &str = "config.json";
pub const TRANSFORM_FILE: &str = "transform.json";

const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    transform_state: TransformState,
    residual_dim: usize,
    online_hadamard: bool,
    quant: Option<QuantScheme>,
}

/// Transform provenance sidecar; `P·Q` itself is stored with the tensors.
#[derive(Serialize, Deserialize)]
struct TransformSidecar {
    rank: usize,
    sign_seed: u64,
    sigma: Vec<f64>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| QuadError::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| QuadError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| QuadError::format(path, e.to_string()))
}

fn prefix(l: usize, kind: LinearKind) -> String {
    format!("layers.{l}.{}", kind.name())
}

fn write_linear(w: &mut TensorWriter, name: &str, lin: &Linear) {
    match lin {
        Linear::Dense(m) => {
            w.matrix_f64(format!("{name}.weight"), m);
        }
        Linear::Quad(q) => {
            match &q.body {
                WeightBody::Quantized(t) => {
                    w.i8(format!("{name}.codes"), &[t.rows(), t.cols()], t.codes());
                    w.f64(format!("{name}.scales"), &[t.rows()], t.scales());
                }
                WeightBody::Dense(m) => {
                    w.matrix_f64(format!("{name}.body"), m);
                }
            }
            if let Some(w_r) = &q.w_r {
                w.matrix_f64(format!("{name}.w_r"), w_r);
            }
            if let Some(b) = &q.lowrank {
                w.f64(format!("{name}.lowrank.s"), &[b.s.len()], &b.s);
                w.matrix_f64(format!("{name}.lowrank.l"), &b.l);
                w.matrix_f64(format!("{name}.lowrank.r"), &b.r);
            }
        }
    }
}

/// Writes `model` into `dir`, creating it if needed.
pub fn save_model(model: &ModelGraph, dir: &Path) -> Result<()> {
    model.validate()?;
    fs::create_dir_all(dir).map_err(|e| QuadError::io(dir, e))?;
    let header = Header {
        format_version: FORMAT_VERSION,
        transform_state: model.transform_state,
        residual_dim: model.residual_dim,
        online_hadamard: model.online_hadamard,
        quant: model.quant.clone(),
    };
    let mut w = TensorWriter::new();
    w.meta(serde_json::to_string(&header)?);
    w.matrix_f64("embedding", &model.embedding);
    w.matrix_f64("lm_head", &model.lm_head);
    w.f64("final_norm", &[model.final_norm.len()], &model.final_norm);
    for (l, layer) in model.layers.iter().enumerate() {
        w.f64(format!("layers.{l}.alpha_attn"), &[layer.alpha_attn.len()], &layer.alpha_attn);
        w.f64(format!("layers.{l}.alpha_ffn"), &[layer.alpha_ffn.len()], &layer.alpha_ffn);
        for kind in LinearKind::ALL {
            write_linear(&mut w, &prefix(l, kind), layer.linear(kind));
        }
    }
    if let Some(meta) = &model.transform_meta {
        w.matrix_f64("transform.residual_map", &meta.residual_map);
    }
    w.write(&dir.join(WEIGHTS_FILE))?;
    write_json(&dir.join(CONFIG_FILE), &model.config)?;

    let sidecar = dir.join(TRANSFORM_FILE);
    match &model.transform_meta {
        Some(meta) => write_json(
            &sidecar,
            &TransformSidecar {
                rank: meta.rank,
                sign_seed: meta.sign_seed,
                sigma: meta.sigma.clone(),
            },
        )?,
        None if sidecar.exists() => fs::remove_file(&sidecar).map_err(|e| QuadError::io(&sidecar, e))?,
        None => {}
    }
    Ok(())
}

fn read_linear(
    file: &TensorFile,
    name: &str,
    model: &ModelGraph,
    header: &Header,
    kind: LinearKind,
) -> Result<Linear> {
    if file.contains(&format!("{name}.weight")) {
        return Ok(Linear::Dense(file.matrix(&format!("{name}.weight"))?));
    }
    let scheme = header
        .quant
        .as_ref()
        .ok_or_else(|| QuadError::state(format!("{name} is quantized but no scheme is recorded")))?;
    let body = if file.contains(&format!("{name}.codes")) {
        let (shape, codes) = file.codes(&format!("{name}.codes"))?;
        let scales = file.vector(&format!("{name}.scales"))?;
        let bits = scheme
            .weight_bits
            .ok_or_else(|| QuadError::state(format!("{name} has codes but the scheme keeps weights dense")))?;
        if shape.len() != 2 {
            return Err(QuadError::dim(format!("{name}.codes must be 2-d")));
        }
        WeightBody::Quantized(QuantizedTensor::new(shape[0], shape[1], codes, scales, bits)?)
    } else {
        WeightBody::Dense(file.matrix(&format!("{name}.body"))?)
    };
    let w_r = if file.contains(&format!("{name}.w_r")) {
        Some(file.matrix(&format!("{name}.w_r"))?)
    } else {
        None
    };
    let lowrank = if file.contains(&format!("{name}.lowrank.s")) {
        Some(BranchFactors {
            s: file.vector(&format!("{name}.lowrank.s"))?,
            l: file.matrix(&format!("{name}.lowrank.l"))?,
            r: file.matrix(&format!("{name}.lowrank.r"))?,
        })
    } else {
        None
    };
    let outlier_dims = w_r.as_ref().map_or(0, DenseMatrix::rows);
    let q = QuadLinear::new(
        outlier_dims,
        body,
        w_r,
        scheme.act_bits_for(kind),
        model.online_for(kind),
        lowrank,
    )?;
    Ok(Linear::Quad(Box::new(q)))
}

/// Reads a directory written by [`save_model`].
pub fn load_model(dir: &Path) -> Result<ModelGraph> {
    let config: ModelConfig = read_json(&dir.join(CONFIG_FILE))?;
    let path = dir.join(WEIGHTS_FILE);
    let file = TensorFile::open(&path)?;
    let header: Header = match file.meta()? {
        Some(text) => serde_json::from_str(&text).map_err(|e| QuadError::format(&path, e.to_string()))?,
        None => return Err(QuadError::format(&path, "missing model header")),
    };
    if header.format_version != FORMAT_VERSION {
        return Err(QuadError::format(
            &path,
            format!("unsupported format version {}", header.format_version),
        ));
    }
    let h = config.hidden_size;
    let mut model = ModelGraph {
        config: config.clone(),
        embedding: file.matrix("embedding")?,
        layers: Vec::with_capacity(config.n_layers),
        final_norm: file.vector("final_norm")?,
        lm_head: file.matrix("lm_head")?,
        residual_dim: header.residual_dim,
        transform_state: header.transform_state,
        online_hadamard: header.online_hadamard,
        transform_meta: None,
        quant: header.quant.clone(),
    };
    for l in 0..config.n_layers {
        let read = |kind| read_linear(&file, &prefix(l, kind), &model, &header, kind);
        let layer = LayerWeights {
            wq: read(LinearKind::Q)?,
            wk: read(LinearKind::K)?,
            wv: read(LinearKind::V)?,
            wo: read(LinearKind::O)?,
            w_up: read(LinearKind::Up)?,
            w_gate: read(LinearKind::Gate)?,
            w_down: read(LinearKind::Down)?,
            alpha_attn: file.vector(&format!("layers.{l}.alpha_attn"))?,
            alpha_ffn: file.vector(&format!("layers.{l}.alpha_ffn"))?,
        };
        model.layers.push(layer);
    }
    let sidecar = dir.join(TRANSFORM_FILE);
    if sidecar.exists() {
        let t: TransformSidecar = read_json(&sidecar)?;
        let residual_map = file.matrix("transform.residual_map")?;
        if residual_map.shape() != (h, h + t.rank) {
            return Err(QuadError::format(&path, "residual map does not match the transform rank"));
        }
        model.transform_meta = Some(TransformMeta {
            rank: t.rank,
            sign_seed: t.sign_seed,
            sigma: t.sigma,
            residual_map,
        });
    }
    model.validate().map_err(|e| QuadError::format(&path, e.to_string()))?;
    Ok(model)
}
