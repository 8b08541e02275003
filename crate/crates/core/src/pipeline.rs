//! End-to-end orchestration: synthesize or load → absorb → calibrate →
//! transform → quantize → tune → evaluate, with every stage written to disk
//! and read back before the next one consumes it.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::calib::{collect_stats, read_token_file, write_token_file, BasisSource, CalibSource, CalibSpec, CalibrationStats};
use crate::error::{QuadError, Result};
use crate::linalg::{is_power_of_two, DenseMatrix};
use crate::model::{
    absorb_rmsnorm, energy_fraction, load_model, sample_sequences, save_model, synth_model, ModelGraph, SynthSpec,
    TransformState,
};
use crate::peft::{tune_model, TuneConfig};
use crate::quantsim::{eval_perplexity, layer_errors, mean_layer_error, quantize_model, LayerError, QuantScheme};
use crate::transform::{
    apply_transform, build_projection, build_rotation, equivalence_report, suppression_fraction, RotationTransform,
    TransformOptions,
};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSource {
    Synthetic(SynthSpec),
    /// A directory written by [`save_model`].
    Directory { path: PathBuf },
}

impl ModelSource {
    pub fn load(&self) -> Result<ModelGraph> {
        match self {
            ModelSource::Synthetic(spec) => synth_model(spec),
            ModelSource::Directory { path } => load_model(path),
        }
    }
}

/// Held-out evaluation tokens, sampled from the full-precision model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSpec {
    pub n_seqs: usize,
    pub seq_len: usize,
    pub seed: u64,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
}

fn default_temperature() -> f64 {
    1.0
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            n_seqs: 16,
            seq_len: 64,
            seed: 2024,
            temperature: 1.0,
        }
    }
}

/// Token stream for tuning. `Teacher` samples from the full-precision model
/// with the tuning seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TuneData {
    Calibration,
    Teacher { n_seqs: usize, seq_len: usize },
}

impl Default for TuneData {
    fn default() -> Self {
        TuneData::Teacher { n_seqs: 32, seq_len: 64 }
    }
}

impl TuneData {
    pub fn tokens(&self, fp: &ModelGraph, calib: &[Vec<u32>], seed: u64) -> Result<Vec<Vec<u32>>> {
        match *self {
            TuneData::Calibration => Ok(calib.to_vec()),
            TuneData::Teacher { n_seqs, seq_len } => {
                if n_seqs == 0 || seq_len < 2 {
                    return Err(QuadError::validation("tuning needs sequences of at least two tokens"));
                }
                sample_sequences(fp, n_seqs, seq_len, 1.0, seed)
            }
        }
    }
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub schema_version: u32,
    pub model: ModelSource,
    pub calib: CalibSpec,
    #[serde(default)]
    pub eval: EvalSpec,
    pub rank: usize,
    /// Sign seed of the randomized Hadamard block.
    pub rotation_seed: u64,
    #[serde(default, with = "basis_serde")]
    pub basis: BasisSource,
    #[serde(default = "default_true")]
    pub online_hadamard: bool,
    pub scheme: QuantScheme,
    #[serde(default)]
    pub tune: Option<TuneConfig>,
    #[serde(default)]
    pub tune_data: TuneData,
    pub output_dir: PathBuf,
}

mod basis_serde {
    use super::BasisSource;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(b: &BasisSource, s: S) -> Result<S::Ok, S::Error> {
        match b {
            BasisSource::Shared => s.serialize_str("shared"),
            BasisSource::Layer(i) => s.serialize_str(&format!("layer:{i}")),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BasisSource, D::Error> {
        let text = String::deserialize(d)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}

impl PipelineConfig {
    /// Desk default on a synthetic outlier model.
    pub fn desk(output_dir: impl Into<PathBuf>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            model: ModelSource::Synthetic(SynthSpec::with_outliers(crate::model::ModelConfig::desk(), 0, 4, 100.0)),
            calib: CalibSpec {
                n_samples: 8,
                seq_len: 64,
                ..CalibSpec::synthetic(1000)
            },
            eval: EvalSpec::default(),
            rank: 8,
            rotation_seed: 0,
            basis: BasisSource::Shared,
            online_hadamard: true,
            scheme: QuantScheme::w4a4(),
            tune: None,
            tune_data: TuneData::default(),
            output_dir: output_dir.into(),
        }
    }

    /// Parses a JSON config; relative paths resolve against the file's directory
    /// and input paths must exist.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| QuadError::io(path, e))?;
        let mut cfg: Self = serde_json::from_str(&text).map_err(|e| QuadError::format(path, e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        if let ModelSource::Directory { path } = &mut self.model {
            fix(path);
        }
        if let CalibSource::TokenFile { path } = &mut self.calib.source {
            fix(path);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(QuadError::validation(format!(
                "config schema version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.calib.validate()?;
        self.scheme.validate()?;
        if let Some(t) = &self.tune {
            t.validate()?;
        }
        if self.eval.n_seqs == 0 || self.eval.seq_len < 2 {
            return Err(QuadError::validation("evaluation needs sequences of at least two tokens"));
        }
        if self.scheme.lowrank_rank.is_some() && self.online_hadamard {
            return Err(QuadError::validation(
                "the low-rank branch replaces online Hadamard; set online_hadamard to false",
            ));
        }
        if let ModelSource::Directory { path } = &self.model {
            if !path.is_dir() {
                return Err(QuadError::validation(format!("model directory {} does not exist", path.display())));
            }
        }
        if let CalibSource::TokenFile { path } = &self.calib.source {
            if !path.is_file() {
                return Err(QuadError::validation(format!("token file {} does not exist", path.display())));
            }
        }
        Ok(())
    }
}

/// One row of the per-projection error table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantLayerError {
    pub variant: String,
    #[serde(flatten)]
    pub error: LayerError,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Perplexities {
    pub fp: f64,
    pub rotation_only: f64,
    pub quad: f64,
    pub quad_tuned: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanErrors {
    pub rotation_only: f64,
    pub quad: f64,
    pub quad_tuned: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneRow {
    pub layer: usize,
    pub kind: crate::model::LinearKind,
    pub initial_loss: f64,
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub scheme: String,
    pub rank: usize,
    pub rotation_seed: u64,
    pub online_hadamard: bool,
    /// Transformed against original FP logits (`max |Δ| / max |logits|`).
    pub equivalence_deviation: f64,
    pub rotation_only_equivalence_deviation: f64,
    pub fusion_residual_max: f64,
    pub outlier_energy_fraction: f64,
    /// Share of tokens whose ordinary-dim max |activation| shrank.
    pub suppression_fraction: f64,
    pub calib_tokens: usize,
    pub eval_tokens: usize,
    pub perplexity: Perplexities,
    pub mean_layer_error: MeanErrors,
    pub layer_errors: Vec<VariantLayerError>,
    pub tuning: Option<Vec<TuneRow>>,
    /// Stage outputs, relative to the output directory.
    pub artifacts: BTreeMap<String, String>,
}

pub struct ReportBundle {
    pub report: Report,
    pub report_json: String,
    pub summary_csv: String,
    pub layer_errors_csv: String,
}

fn stage_err(stage: &str, paths: &[&Path]) -> impl Fn(QuadError) -> QuadError {
    let label = if paths.is_empty() {
        stage.to_string()
    } else {
        let joined: Vec<String> = paths.iter().map(|p| p.display().to_string()).collect();
        format!("{stage} [{}]", joined.join(", "))
    };
    move |e| e.in_stage(&label)
}

fn save_and_reload(model: &ModelGraph, dir: &Path) -> Result<ModelGraph> {
    save_model(model, dir)?;
    load_model(dir)
}

fn stats_round_trip(model: &ModelGraph, seqs: &[Vec<u32>], path: &Path) -> Result<CalibrationStats> {
    collect_stats(model, seqs)?.save(path)?;
    CalibrationStats::load(path)
}

/// Randomized Hadamard block, or the identity block when `h` is not a power of
/// two and the low-rank branch stands in for the online transform.
pub fn rotation_for(r: usize, h: usize, seed: u64, lowrank: bool) -> Result<RotationTransform> {
    if lowrank && !is_power_of_two(h) {
        log::info!("hidden size {h} is not a power of two; using an identity rotation block");
        return Ok(RotationTransform::identity(r, h));
    }
    build_rotation(r, h, seed)
}

fn transform_with(
    absorbed: &ModelGraph,
    u: &DenseMatrix,
    sigma: &[f64],
    r: usize,
    seed: u64,
    scheme: &QuantScheme,
    online_hadamard: bool,
) -> Result<ModelGraph> {
    let h = absorbed.config.hidden_size;
    if r > h {
        return Err(QuadError::range(format!("rank {r} exceeds hidden size {h}")));
    }
    let proj = build_projection(u, sigma, r)?;
    let rot = rotation_for(r, h, seed, scheme.lowrank_rank.is_some())?;
    apply_transform(absorbed, &proj, &rot, TransformOptions { online_hadamard })
}

fn rel(dir: &Path, p: &Path) -> String {
    p.strip_prefix(dir).unwrap_or(p).display().to_string()
}

fn csv_string<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).map_err(|e| QuadError::validation(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| QuadError::validation(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    variant: &'a str,
    perplexity: f64,
    mean_layer_error: Option<f64>,
}

#[derive(Serialize)]
struct ErrorRow<'a> {
    variant: &'a str,
    layer: usize,
    kind: &'a str,
    rel_error: f64,
}

/// Runs every stage and writes `report.json`, `summary.csv` and
/// `layer_errors.csv` into the output directory.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<ReportBundle> {
    cfg.validate()?;
    let out = &cfg.output_dir;
    let models = out.join("models");
    let data = out.join("data");
    for d in [&models, &data] {
        fs::create_dir_all(d).map_err(|e| QuadError::io(d, e))?;
    }
    let mut artifacts = BTreeMap::new();
    let mut note = |key: &str, p: &Path| {
        artifacts.insert(key.to_string(), rel(out, p));
    };

    let fp_dir = models.join("fp");
    let fp = cfg
        .model
        .load()
        .and_then(|m| save_and_reload(&m, &fp_dir))
        .map_err(stage_err("model", &[&fp_dir]))?;
    note("fp", &fp_dir);
    if fp.transform_state != TransformState::None || fp.is_quantized() {
        return Err(QuadError::state("pipeline input must be an untransformed full-precision model").in_stage("model"));
    }

    let calib_path = data.join("calib.tokens");
    let eval_path = data.join("eval.tokens");
    let calib_seqs = cfg
        .calib
        .tokens(fp.config.vocab_size)
        .and_then(|s| write_token_file(&calib_path, &s))
        .and_then(|_| read_token_file(&calib_path))
        .map_err(stage_err("calibrate", &[&calib_path]))?;
    let eval_seqs = sample_sequences(&fp, cfg.eval.n_seqs, cfg.eval.seq_len, cfg.eval.temperature, cfg.eval.seed)
        .and_then(|s| write_token_file(&eval_path, &s))
        .and_then(|_| read_token_file(&eval_path))
        .map_err(stage_err("eval", &[&eval_path]))?;
    note("calib_tokens", &calib_path);
    note("eval_tokens", &eval_path);

    let abs_dir = models.join("absorbed");
    let absorbed = absorb_rmsnorm(&fp)
        .and_then(|m| save_and_reload(&m, &abs_dir))
        .map_err(stage_err("absorb", &[&abs_dir]))?;
    note("absorbed", &abs_dir);

    let stats_abs_path = data.join("absorbed.stats.safetensors");
    let stats_abs = stats_round_trip(&absorbed, &calib_seqs, &stats_abs_path)
        .map_err(stage_err("calibrate", &[&abs_dir, &stats_abs_path]))?;
    note("absorbed_stats", &stats_abs_path);
    let (u, sigma) = stats_abs.basis(cfg.basis).map_err(stage_err("calibrate", &[&stats_abs_path]))?;

    let t_dir = models.join("transformed");
    let transformed = transform_with(&absorbed, &u, &sigma, cfg.rank, cfg.rotation_seed, &cfg.scheme, cfg.online_hadamard)
        .and_then(|m| save_and_reload(&m, &t_dir))
        .map_err(stage_err("transform", &[&abs_dir, &t_dir]))?;
    note("transformed", &t_dir);
    let ro_dir = models.join("rotation_only");
    let rotation_only = transform_with(&absorbed, &u, &sigma, 0, cfg.rotation_seed, &cfg.scheme, cfg.online_hadamard)
        .and_then(|m| save_and_reload(&m, &ro_dir))
        .map_err(stage_err("transform", &[&abs_dir, &ro_dir]))?;
    note("rotation_only", &ro_dir);

    let equiv = equivalence_report(&fp, &transformed, &eval_seqs).map_err(stage_err("transform", &[&t_dir]))?;
    let equiv_ro = equivalence_report(&fp, &rotation_only, &eval_seqs).map_err(stage_err("transform", &[&ro_dir]))?;
    let suppression = suppression_fraction(&absorbed, &transformed, &eval_seqs).map_err(stage_err("transform", &[&t_dir]))?;

    let quantize = |model: &ModelGraph, name: &str| -> Result<(ModelGraph, PathBuf, PathBuf)> {
        let stats_path = data.join(format!("{name}.stats.safetensors"));
        let q_dir = models.join(format!("{name}_quantized"));
        let qm = stats_round_trip(model, &calib_seqs, &stats_path)
            .and_then(|st| quantize_model(model, &cfg.scheme, &st))
            .and_then(|m| save_and_reload(&m, &q_dir))
            .map_err(stage_err("quantize", &[&stats_path, &q_dir]))?;
        Ok((qm, stats_path, q_dir))
    };
    let (quad_q, quad_stats, quad_dir) = quantize(&transformed, "transformed")?;
    let (ro_q, ro_stats, ro_q_dir) = quantize(&rotation_only, "rotation_only")?;
    note("transformed_stats", &quad_stats);
    note("transformed_quantized", &quad_dir);
    note("rotation_only_stats", &ro_stats);
    note("rotation_only_quantized", &ro_q_dir);

    let tuned = match &cfg.tune {
        Some(tc) => {
            let tuned_dir = models.join("transformed_tuned");
            let tune_path = data.join("tune.tokens");
            let tune_seqs = cfg
                .tune_data
                .tokens(&fp, &calib_seqs, tc.seed)
                .and_then(|s| write_token_file(&tune_path, &s))
                .and_then(|_| read_token_file(&tune_path))
                .map_err(stage_err("tune", &[&tune_path]))?;
            note("tune_tokens", &tune_path);
            let (m, summary) = tune_model(&quad_q, &transformed, &tune_seqs, tc)
                .and_then(|(m, s)| Ok((save_and_reload(&m, &tuned_dir)?, s)))
                .map_err(stage_err("tune", &[&quad_dir, &tuned_dir]))?;
            note("transformed_tuned", &tuned_dir);
            let rows = summary
                .fits
                .into_iter()
                .map(|(layer, kind, f)| TuneRow {
                    layer,
                    kind,
                    initial_loss: f.initial_loss,
                    final_loss: f.final_loss,
                })
                .collect();
            Some((m, rows))
        }
        None => None,
    };

    let eval = stage_err("eval", &[&eval_path]);
    let ppl_fp = eval_perplexity(&fp, &eval_seqs).map_err(&eval)?;
    let ppl_ro = eval_perplexity(&ro_q, &eval_seqs).map_err(&eval)?;
    let ppl_quad = eval_perplexity(&quad_q, &eval_seqs).map_err(&eval)?;
    let ppl_tuned = match &tuned {
        Some((m, _)) => Some(eval_perplexity(m, &eval_seqs).map_err(&eval)?),
        None => None,
    };
    let err_ro = layer_errors(&rotation_only, &ro_q, &eval_seqs).map_err(&eval)?;
    let err_quad = layer_errors(&transformed, &quad_q, &eval_seqs).map_err(&eval)?;
    let err_tuned = match &tuned {
        Some((m, _)) => Some(layer_errors(&transformed, m, &eval_seqs).map_err(&eval)?),
        None => None,
    };

    let mut all_errors = Vec::new();
    let mut push = |variant: &str, errs: &[LayerError]| {
        all_errors.extend(errs.iter().map(|e| VariantLayerError {
            variant: variant.to_string(),
            error: e.clone(),
        }))
    };
    push("rotation_only", &err_ro);
    push("quad", &err_quad);
    if let Some(e) = &err_tuned {
        push("quad_tuned", e);
    }

    let report = Report {
        schema_version: SCHEMA_VERSION,
        scheme: cfg.scheme.label(),
        rank: cfg.rank,
        rotation_seed: cfg.rotation_seed,
        online_hadamard: cfg.online_hadamard,
        equivalence_deviation: equiv.equivalence_deviation,
        rotation_only_equivalence_deviation: equiv_ro.equivalence_deviation,
        fusion_residual_max: equiv.fusion_residual.iter().cloned().fold(0.0, f64::max),
        outlier_energy_fraction: energy_fraction(&sigma, cfg.rank),
        suppression_fraction: suppression,
        calib_tokens: calib_seqs.iter().map(Vec::len).sum(),
        eval_tokens: eval_seqs.iter().map(Vec::len).sum(),
        perplexity: Perplexities {
            fp: ppl_fp,
            rotation_only: ppl_ro,
            quad: ppl_quad,
            quad_tuned: ppl_tuned,
        },
        mean_layer_error: MeanErrors {
            rotation_only: mean_layer_error(&err_ro),
            quad: mean_layer_error(&err_quad),
            quad_tuned: err_tuned.as_deref().map(mean_layer_error),
        },
        layer_errors: all_errors,
        tuning: tuned.map(|(_, rows)| rows),
        artifacts,
    };

    let mut summary = vec![
        SummaryRow { variant: "fp", perplexity: ppl_fp, mean_layer_error: None },
        SummaryRow { variant: "rotation_only", perplexity: ppl_ro, mean_layer_error: Some(report.mean_layer_error.rotation_only) },
        SummaryRow { variant: "quad", perplexity: ppl_quad, mean_layer_error: Some(report.mean_layer_error.quad) },
    ];
    if let (Some(p), Some(e)) = (ppl_tuned, report.mean_layer_error.quad_tuned) {
        summary.push(SummaryRow { variant: "quad_tuned", perplexity: p, mean_layer_error: Some(e) });
    }
    let bundle = ReportBundle {
        report_json: format!("{}\n", serde_json::to_string_pretty(&report)?),
        summary_csv: csv_string(&summary)?,
        layer_errors_csv: csv_string(
            &report
                .layer_errors
                .iter()
                .map(|e| ErrorRow {
                    variant: &e.variant,
                    layer: e.error.layer,
                    kind: e.error.kind.name(),
                    rel_error: e.error.rel_error,
                })
                .collect::<Vec<_>>(),
        )?,
        report,
    };
    for (name, body) in [
        ("report.json", &bundle.report_json),
        ("summary.csv", &bundle.summary_csv),
        ("layer_errors.csv", &bundle.layer_errors_csv),
    ] {
        let p = out.join(name);
        fs::write(&p, body).map_err(|e| QuadError::io(&p, e))?;
    }
    Ok(bundle)
}

/// One configuration of an ablation; `scheme = None` evaluates the
/// original full-precision model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub rank: usize,
    pub scheme: Option<QuantScheme>,
    #[serde(default)]
    pub tune: bool,
}

impl Variant {
    pub fn fp() -> Self {
        Self {
            name: "fp".into(),
            rank: 0,
            scheme: None,
            tune: false,
        }
    }

    pub fn quantized(rank: usize, scheme: QuantScheme) -> Self {
        Self {
            name: format!("r{rank}:{}", scheme.label()),
            rank,
            scheme: Some(scheme),
            tune: false,
        }
    }
}

/// `fp`, or `r<rank>:<scheme>` with optional `:lowrank<k>` and `:tuned`
/// suffixes, e.g. `r8:w4a4a8:lowrank16`.
impl FromStr for Variant {
    type Err = QuadError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "fp" {
            return Ok(Self::fp());
        }
        let bad = || QuadError::validation(format!("bad variant '{s}' (fp | r<rank>:<scheme>[:lowrank<k>][:tuned])"));
        let mut parts = s.split(':');
        let rank: usize = parts
            .next()
            .and_then(|p| p.strip_prefix('r'))
            .and_then(|p| p.parse().ok())
            .ok_or_else(bad)?;
        let mut scheme: QuantScheme = parts.next().ok_or_else(bad)?.parse()?;
        let mut tune = false;
        for p in parts {
            if p == "tuned" {
                tune = true;
            } else if let Some(k) = p.strip_prefix("lowrank") {
                scheme = scheme.with_lowrank(k.parse().map_err(|_| bad())?);
            } else {
                return Err(bad());
            }
        }
        Ok(Self {
            name: s.to_string(),
            rank,
            scheme: Some(scheme),
            tune,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub perplexity: f64,
    pub mean_layer_error: f64,
    pub outlier_energy_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> Result<String> {
        csv_string(&self.rows)
    }
}

/// Evaluates each variant on the model, calibration and evaluation data of
/// `cfg`. Rows follow the order of `variants`. Variants with a low-rank
/// branch are transformed without online Hadamard.
pub fn ablation(cfg: &PipelineConfig, variants: &[Variant]) -> Result<AblationTable> {
    if variants.is_empty() {
        return Err(QuadError::validation("ablation needs at least one variant"));
    }
    let fp = cfg.model.load().map_err(stage_err("model", &[]))?;
    let calib_seqs = cfg.calib.tokens(fp.config.vocab_size).map_err(stage_err("calibrate", &[]))?;
    let eval_seqs = sample_sequences(&fp, cfg.eval.n_seqs, cfg.eval.seq_len, cfg.eval.temperature, cfg.eval.seed)
        .map_err(stage_err("eval", &[]))?;
    let absorbed = absorb_rmsnorm(&fp).map_err(stage_err("absorb", &[]))?;
    let stats = collect_stats(&absorbed, &calib_seqs).map_err(stage_err("calibrate", &[]))?;
    let (u, sigma) = stats.basis(cfg.basis).map_err(stage_err("calibrate", &[]))?;

    let mut cache: BTreeMap<(usize, bool, bool), (ModelGraph, CalibrationStats)> = BTreeMap::new();
    let mut rows = Vec::with_capacity(variants.len());
    for v in variants {
        let stage = |s: &str| format!("{s} ({})", v.name);
        let Some(scheme) = &v.scheme else {
            rows.push(AblationRow {
                variant: v.name.clone(),
                perplexity: eval_perplexity(&fp, &eval_seqs).map_err(|e| e.in_stage(&stage("eval")))?,
                mean_layer_error: 0.0,
                outlier_energy_fraction: 0.0,
            });
            continue;
        };
        let lowrank = scheme.lowrank_rank.is_some();
        let online = cfg.online_hadamard && !lowrank;
        let key = (v.rank, online, lowrank);
        if !cache.contains_key(&key) {
            let t = transform_with(&absorbed, &u, &sigma, v.rank, cfg.rotation_seed, scheme, online)
                .map_err(|e| e.in_stage(&stage("transform")))?;
            let st = collect_stats(&t, &calib_seqs).map_err(|e| e.in_stage(&stage("calibrate")))?;
            cache.insert(key, (t, st));
        }
        let (t, st) = &cache[&key];
        let mut q = quantize_model(t, scheme, st).map_err(|e| e.in_stage(&stage("quantize")))?;
        if v.tune {
            let tc = cfg.tune.clone().unwrap_or_default();
            let seqs = cfg.tune_data.tokens(&fp, &calib_seqs, tc.seed).map_err(|e| e.in_stage(&stage("tune")))?;
            q = tune_model(&q, t, &seqs, &tc).map_err(|e| e.in_stage(&stage("tune")))?.0;
        }
        let errs = layer_errors(t, &q, &eval_seqs).map_err(|e| e.in_stage(&stage("eval")))?;
        rows.push(AblationRow {
            variant: v.name.clone(),
            perplexity: eval_perplexity(&q, &eval_seqs).map_err(|e| e.in_stage(&stage("eval")))?,
            mean_layer_error: mean_layer_error(&errs),
            outlier_energy_fraction: energy_fraction(&sigma, v.rank),
        });
    }
    Ok(AblationTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny_config(dir: &Path) -> PipelineConfig {
        let mut cfg = PipelineConfig::desk(dir);
        cfg.model = ModelSource::Synthetic(SynthSpec::with_outliers(ModelConfig::tiny(), 3, 2, 50.0));
        cfg.calib = CalibSpec {
            n_samples: 4,
            seq_len: 16,
            ..CalibSpec::synthetic(7)
        };
        cfg.eval = EvalSpec {
            n_seqs: 2,
            seq_len: 16,
            ..EvalSpec::default()
        };
        cfg.rank = 2;
        cfg
    }

    #[test]
    fn config_json_round_trip() {
        let mut cfg = PipelineConfig::desk("out");
        cfg.basis = BasisSource::Layer(1);
        cfg.tune = Some(TuneConfig::default());
        let text = serde_json::to_string(&cfg).unwrap();
        assert!(text.contains("\"layer:1\""));
        let back: PipelineConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn config_validation() {
        let mut cfg = PipelineConfig::desk("out");
        cfg.schema_version = 99;
        assert!(cfg.validate().is_err());
        let mut cfg = PipelineConfig::desk("out");
        cfg.scheme = QuantScheme::w4a4().with_lowrank(4);
        assert!(cfg.validate().is_err());
        cfg.online_hadamard = false;
        cfg.validate().unwrap();
        cfg.model = ModelSource::Directory { path: "/no/such/model".into() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn relative_paths_resolve_against_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = PipelineConfig::desk("run");
        cfg.schema_version = SCHEMA_VERSION;
        let path = dir.path().join("cfg.json");
        fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
        let loaded = PipelineConfig::from_file(&path).unwrap();
        assert_eq!(loaded.output_dir, dir.path().join("run"));
    }

    #[test]
    fn variant_parsing() {
        assert_eq!("fp".parse::<Variant>().unwrap(), Variant::fp());
        let v: Variant = "r8:w4a4a8:lowrank16:tuned".parse().unwrap();
        assert_eq!(v.rank, 8);
        assert!(v.tune);
        assert_eq!(v.scheme.unwrap().lowrank_rank, Some(16));
        for bad in ["r:w4a4", "8:w4a4", "r8", "r8:w4a4:extra"] {
            assert!(bad.parse::<Variant>().is_err(), "{bad}");
        }
    }

    #[test]
    fn full_precision_run_preserves_perplexity() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(dir.path());
        cfg.rank = 0;
        cfg.scheme = QuantScheme::full_precision();
        let b = run_pipeline(&cfg).unwrap();
        let r = &b.report;
        assert!(r.equivalence_deviation <= 1e-6);
        assert!((r.perplexity.quad - r.perplexity.fp).abs() <= 1e-9 * r.perplexity.fp);
        assert!(dir.path().join("report.json").is_file());
        for key in ["fp", "absorbed", "transformed", "transformed_quantized", "eval_tokens"] {
            assert!(dir.path().join(&r.artifacts[key]).exists(), "{key}");
        }
    }

    #[test]
    fn fp_only_ablation_matches_direct_perplexity() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        let table = ablation(&cfg, &[Variant::fp()]).unwrap();
        let fp = cfg.model.load().unwrap();
        let seqs = sample_sequences(&fp, 2, 16, 1.0, cfg.eval.seed).unwrap();
        assert_eq!(table.rows.len(), 1);
        assert_eq!(table.rows[0].perplexity, eval_perplexity(&fp, &seqs).unwrap());
        assert!(ablation(&cfg, &[]).is_err());
    }
}
