use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use quad_core::calib::{collect_stats, read_token_file, BasisSource, CalibrationStats};
use quad_core::model::{
    absorb_rmsnorm, energy_fraction, load_model, sample_sequences, save_model, synth_model, ModelConfig,
    ModelGraph, SynthSpec, TransformState,
};
use quad_core::peft::{tune_model, TuneConfig, TuneTargets};
use quad_core::pipeline::{ablation, rotation_for, run_pipeline, PipelineConfig, Variant};
use quad_core::quantsim::{eval_perplexity, layer_errors, mean_layer_error, quantize_model, QuantScheme};
use quad_core::transform::{apply_transform, build_projection, TransformOptions};
use quad_core::{QuadError, Result};

#[derive(Parser)]
#[command(name = "quad", version, about = "Outlier projection, Hadamard rotation and 4-bit quantization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic model.
    SynthModel(SynthArgs),
    /// Accumulate Gram statistics of a model's activations.
    Calibrate(CalibrateArgs),
    /// Absorb norms, project outlier directions and rotate.
    Transform(TransformArgs),
    /// Quantize a transformed model.
    Quantize(QuantizeArgs),
    /// Distill a quantized model against its full-precision teacher.
    Tune(TuneArgs),
    /// Perplexity, and per-layer errors when a reference is given.
    Eval(EvalArgs),
    /// Compare variants on one configuration.
    Ablate(AblateArgs),
    /// Run the whole pipeline from a JSON configuration.
    Run(RunArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// `desk`, `tiny`, or a JSON model config.
    #[arg(long, default_value = "desk")]
    config: String,
    #[arg(long, default_value_t = 0)]
    outlier_rank: usize,
    #[arg(long, default_value_t = 100.0)]
    outlier_gain: f64,
}

/// Token source: `uniform:SEED`, `sample:SEED` (drawn from a model) or `file:PATH`.
#[derive(Args)]
struct TokenArgs {
    #[arg(long = "calib", value_name = "SPEC")]
    spec: String,
    #[arg(long, default_value_t = 8)]
    n_seqs: usize,
    #[arg(long, default_value_t = 64)]
    seq_len: usize,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    tokens: TokenArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TransformArgs {
    #[arg(long)]
    model: PathBuf,
    /// Statistics from `calibrate` on the same model.
    #[arg(long)]
    gram: PathBuf,
    #[arg(long)]
    rank: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// `shared` or `layer:<i>`.
    #[arg(long, default_value = "shared")]
    u_source: BasisSource,
    #[arg(long)]
    no_online_hadamard: bool,
    /// `lowrank:<k>`: leave out online Hadamard so a low-rank branch can replace it.
    #[arg(long, value_name = "lowrank:K")]
    replace_hadamard: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct QuantizeArgs {
    #[arg(long)]
    model: PathBuf,
    /// Statistics from `calibrate` on the transformed model.
    #[arg(long)]
    gram: PathBuf,
    #[arg(long, default_value = "w4a4")]
    scheme: QuantScheme,
    #[arg(long, value_name = "lowrank:K")]
    replace_hadamard: Option<String>,
    #[arg(long)]
    act_clip: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TuneArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    teacher: PathBuf,
    #[command(flatten)]
    tokens: TokenArgs,
    #[arg(long, default_value_t = 100)]
    steps: usize,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    no_w_r: bool,
    #[arg(long)]
    no_scales: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    tokens: TokenArgs,
    /// Full-precision model the quantized one came from, for per-layer errors.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Write the JSON result here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated: `fp`, `r<rank>:<scheme>[:lowrank<k>][:tuned]`.
    #[arg(long, value_delimiter = ',', required = true)]
    variants: Vec<Variant>,
    /// CSV destination; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
}

fn parse_lowrank(flag: &Option<String>) -> Result<Option<usize>> {
    let Some(text) = flag else { return Ok(None) };
    text.strip_prefix("lowrank:")
        .and_then(|k| k.parse().ok())
        .map(Some)
        .ok_or_else(|| QuadError::validation(format!("--replace-hadamard expects lowrank:<k>, got '{text}'")))
}

fn tokens(args: &TokenArgs, model: &ModelGraph) -> Result<Vec<Vec<u32>>> {
    let vocab = model.config.vocab_size;
    let (kind, rest) = args
        .spec
        .split_once(':')
        .ok_or_else(|| QuadError::validation(format!("token spec '{}' needs a kind prefix", args.spec)))?;
    let seed = || {
        rest.parse::<u64>()
            .map_err(|_| QuadError::validation(format!("bad seed in token spec '{}'", args.spec)))
    };
    match kind {
        "uniform" => quad_core::calib::CalibSpec {
            n_samples: args.n_seqs,
            seq_len: args.seq_len,
            ..quad_core::calib::CalibSpec::synthetic(seed()?)
        }
        .tokens(vocab),
        "sample" => sample_sequences(model, args.n_seqs, args.seq_len, 1.0, seed()?),
        "file" => read_token_file(Path::new(rest)),
        _ => Err(QuadError::validation(format!(
            "unknown token source '{kind}' (uniform | sample | file)"
        ))),
    }
}

fn write_json<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let text = format!("{}\n", serde_json::to_string_pretty(value)?);
    match out {
        Some(p) => fs::write(p, text).map_err(|e| QuadError::io(p, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let config = match a.config.as_str() {
        "desk" => ModelConfig::desk(),
        "tiny" => ModelConfig::tiny(),
        path => {
            let text = fs::read_to_string(path).map_err(|e| QuadError::io(path, e))?;
            serde_json::from_str(&text).map_err(|e| QuadError::format(path, e.to_string()))?
        }
    };
    let spec = if a.outlier_rank > 0 {
        SynthSpec::with_outliers(config, a.seed, a.outlier_rank, a.outlier_gain)
    } else {
        SynthSpec::plain(config, a.seed)
    };
    save_model(&synth_model(&spec)?, &a.out)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn calibrate(a: CalibrateArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let seqs = tokens(&a.tokens, &model)?;
    let stats = collect_stats(&model, &seqs)?;
    stats.save(&a.out)?;
    println!("wrote {} ({} tokens)", a.out.display(), stats.residual.token_count());
    Ok(())
}

fn transform(a: TransformArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let absorbed = match model.transform_state {
        TransformState::None => absorb_rmsnorm(&model)?,
        TransformState::Absorbed => model,
        TransformState::Transformed { .. } => return Err(QuadError::state("model is already transformed")),
    };
    let lowrank = parse_lowrank(&a.replace_hadamard)?.is_some();
    let stats = CalibrationStats::load(&a.gram)?;
    let (u, sigma) = stats.basis(a.u_source)?;
    let proj = build_projection(&u, &sigma, a.rank)?;
    let rot = rotation_for(a.rank, absorbed.config.hidden_size, a.seed, lowrank)?;
    let opts = TransformOptions {
        online_hadamard: !(a.no_online_hadamard || lowrank),
    };
    let t = apply_transform(&absorbed, &proj, &rot, opts)?;
    save_model(&t, &a.out)?;
    println!(
        "wrote {} (rank {}, outlier energy {:.4})",
        a.out.display(),
        a.rank,
        energy_fraction(&sigma, a.rank)
    );
    Ok(())
}

fn quantize(a: QuantizeArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let stats = CalibrationStats::load(&a.gram)?;
    let mut scheme = a.scheme;
    if let Some(k) = parse_lowrank(&a.replace_hadamard)? {
        scheme = scheme.with_lowrank(k);
    }
    if let Some(c) = a.act_clip {
        scheme.act_clip = c;
    }
    let q = quantize_model(&model, &scheme, &stats)?;
    save_model(&q, &a.out)?;
    println!("wrote {} ({})", a.out.display(), scheme.label());
    Ok(())
}

fn tune(a: TuneArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let teacher = load_model(&a.teacher)?;
    let seqs = tokens(&a.tokens, &teacher)?;
    let cfg = TuneConfig {
        steps: a.steps,
        lr: a.lr,
        seed: a.seed,
        targets: TuneTargets {
            w_r: !a.no_w_r,
            u_scales: !a.no_scales,
            d_scales: !a.no_scales,
        },
        ..TuneConfig::default()
    };
    let (tuned, summary) = tune_model(&model, &teacher, &seqs, &cfg)?;
    save_model(&tuned, &a.out)?;
    let (before, after) = summary
        .fits
        .iter()
        .fold((0.0, 0.0), |(b, f), (_, _, fit)| (b + fit.initial_loss, f + fit.final_loss));
    println!("wrote {} (summed layer loss {before:.6} -> {after:.6})", a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput {
    perplexity: f64,
    tokens: usize,
    mean_layer_error: Option<f64>,
    layer_errors: Option<Vec<quad_core::quantsim::LayerError>>,
}

fn eval(a: EvalArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let seqs = tokens(&a.tokens, &model)?;
    let perplexity = eval_perplexity(&model, &seqs)?;
    let errors = match &a.reference {
        Some(r) => Some(layer_errors(&load_model(r)?, &model, &seqs)?),
        None => None,
    };
    write_json(
        &EvalOutput {
            perplexity,
            tokens: seqs.iter().map(Vec::len).sum(),
            mean_layer_error: errors.as_deref().map(mean_layer_error),
            layer_errors: errors,
        },
        a.out.as_deref(),
    )
}

fn ablate(a: AblateArgs) -> Result<()> {
    let cfg = PipelineConfig::from_file(&a.config)?;
    let csv = ablation(&cfg, &a.variants)?.to_csv()?;
    match a.out {
        Some(p) => fs::write(&p, csv).map_err(|e| QuadError::io(&p, e)),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn run(a: RunArgs) -> Result<()> {
    let cfg = PipelineConfig::from_file(&a.config)?;
    let bundle = run_pipeline(&cfg)?;
    let p = &bundle.report.perplexity;
    println!("report written to {}", cfg.output_dir.join("report.json").display());
    println!(
        "perplexity: fp {:.4}, rotation-only {:.4}, quad {:.4}{}",
        p.fp,
        p.rotation_only,
        p.quad,
        p.quad_tuned.map_or(String::new(), |t| format!(", tuned {t:.4}"))
    );
    Ok(())
}

fn exit_code(err: &QuadError) -> u8 {
    match err {
        QuadError::Stage { source, .. } => exit_code(source),
        QuadError::Numerical(_) => 3,
        QuadError::Io { .. } => 1,
        _ => 2,
    }
}

fn init_threads() -> Result<()> {
    let Ok(text) = std::env::var("QUAD_THREADS") else { return Ok(()) };
    let n: usize = text
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| QuadError::validation(format!("QUAD_THREADS must be a positive integer, got '{text}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| QuadError::validation(e.to_string()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = init_threads().and_then(|()| match cli.command {
        Command::SynthModel(a) => synth(a),
        Command::Calibrate(a) => calibrate(a),
        Command::Transform(a) => transform(a),
        Command::Quantize(a) => quantize(a),
        Command::Tune(a) => tune(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Run(a) => run(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
