//! Acceptance checks, one PASS/FAIL line per criterion.
//!
//! Runs as its own harness (`cargo test --test acceptance`); the process
//! fails if any criterion fails.

use std::path::Path;
use std::time::Instant;

use quad_core::calib::{collect_stats, BasisSource, CalibSpec};
use quad_core::linalg::{eig_gram, seeded_rng, walsh_hadamard, DenseMatrix};
use quad_core::lowrank::{build_lowrank_branch, forward_lowrank};
use quad_core::model::synth::random_orthonormal;
use quad_core::model::{absorb_rmsnorm, forward_batch, sample_sequences, synth_model, ModelConfig, ModelGraph, SynthSpec};
use quad_core::peft::{grad_approx_error, gram_approx_residual, loss_and_grads, singular_tail, tune_layer, tune_model, TuneConfig};
use quad_core::pipeline::{run_pipeline, PipelineConfig};
use quad_core::quantsim::{
    dequantize_weight, eval_perplexity, fake_quant_rows, gptq_quantize, layer_errors, mean_layer_error, quant_error,
    quant_error_bound, quantize_model, rtn_quantize_weight, weighted_error, ActBits, Bits, QuadLinear, QuantScheme,
    Quantizer, WeightBody,
};
use quad_core::model::LinearKind;
use quad_core::linalg::OnlineHadamard;
use quad_core::transform::{apply_transform, build_projection, build_rotation, relative_deviation, suppression_fraction, TransformOptions};
use rand::Rng;

type Criterion = (usize, &'static str, Box<dyn Fn() -> Outcome>);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn orthonormal_basis(h: usize, seed: u64) -> (DenseMatrix, Vec<f64>) {
    let mut rng = seeded_rng(seed);
    let x = DenseMatrix::gaussian(h + 8, h, 1.0, &mut rng);
    let (u, ev) = eig_gram(&x.gram()).unwrap();
    (u, ev.iter().map(|e| e.max(0.0).sqrt()).collect())
}

fn c1_orthogonality() -> Outcome {
    let mut rng = seeded_rng(1);
    let mut worst = 0.0f64;
    for i in 0..200 {
        let h = rng.random_range(1..=256);
        let r = rng.random_range(0..=h);
        let (u, sigma) = orthonormal_basis(h, 100 + i);
        let p = build_projection(&u, &sigma, r).unwrap().p;
        let ppt = p.matmul(&p.transpose());
        worst = worst.max(ppt.max_abs_diff(&DenseMatrix::identity(h)));
    }
    outcome(worst <= 1e-10, format!("max |PPᵀ − I| = {worst:.2e} over 200 instances"))
}

fn calib_tokens(vocab: usize, n: usize, len: usize, seed: u64) -> Vec<Vec<u32>> {
    CalibSpec {
        n_samples: n,
        seq_len: len,
        ..CalibSpec::synthetic(seed)
    }
    .tokens(vocab)
    .unwrap()
}

fn transformed(absorbed: &ModelGraph, seqs: &[Vec<u32>], r: usize, seed: u64, online: bool) -> ModelGraph {
    let stats = collect_stats(absorbed, seqs).unwrap();
    let (u, sigma) = stats.basis(BasisSource::Shared).unwrap();
    let p = build_projection(&u, &sigma, r).unwrap();
    let q = build_rotation(r, absorbed.config.hidden_size, seed).unwrap();
    apply_transform(absorbed, &p, &q, TransformOptions { online_hadamard: online }).unwrap()
}

fn c2_equivalence() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..50u64 {
        let mut config = ModelConfig::desk();
        if seed % 2 == 1 {
            config.rope_theta = Some(10_000.0);
        }
        let fp = synth_model(&SynthSpec::with_outliers(config, seed, 4, 100.0)).unwrap();
        let absorbed = absorb_rmsnorm(&fp).unwrap();
        let calib = calib_tokens(256, 4, 32, seed + 500);
        let t = transformed(&absorbed, &calib, 8, seed, seed % 3 != 0);
        let probe = calib_tokens(256, 2, 32, seed + 900);
        worst = worst.max(relative_deviation(&forward_batch(&fp, &probe).unwrap(), &forward_batch(&t, &probe).unwrap()));
    }
    outcome(worst <= 1e-6, format!("max relative logit deviation {worst:.2e} over 50 models"))
}

fn c3_hadamard() -> Outcome {
    let mut rng = seeded_rng(3);
    let (mut worst_fast, mut worst_twice) = (0.0f64, 0.0f64);
    let mut d = 2;
    while d <= 4096 {
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fast = walsh_hadamard(&x).unwrap();
        // independent oracle: explicit (−1)^{popcount(i&j)} / √d
        let norm = 1.0 / (d as f64).sqrt();
        for (i, f) in fast.iter().enumerate() {
            let naive: f64 = x
                .iter()
                .enumerate()
                .map(|(j, v)| if (i & j).count_ones() % 2 == 0 { *v } else { -*v })
                .sum::<f64>()
                * norm;
            worst_fast = worst_fast.max((f - naive).abs());
        }
        let twice = walsh_hadamard(&fast).unwrap();
        worst_twice = worst_twice.max(twice.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        d *= 2;
    }
    outcome(
        worst_fast <= 1e-12 && worst_twice <= 1e-12,
        format!("fast vs naive {worst_fast:.2e}, H·H·x − x {worst_twice:.2e}, d = 2..4096"),
    )
}

fn c4_error_bound() -> Outcome {
    let mut rng = seeded_rng(4);
    let mut violations = 0;
    let mut min_slack = f64::INFINITY;
    for _ in 0..1000 {
        let (b, n, m) = (rng.random_range(1..12), rng.random_range(1..24), rng.random_range(1..10));
        let scale = 10f64.powf(rng.random_range(-2.0..2.0));
        let x = DenseMatrix::gaussian(b, n, scale, &mut rng);
        let w = DenseMatrix::gaussian(n, m, 1.0, &mut rng);
        let bits = |r: &mut rand_chacha::ChaCha8Rng| if r.random_bool(0.5) { Bits::Int4 } else { Bits::Int8 };
        let q = Quantizer {
            act_bits: Some(bits(&mut rng)),
            act_clip: rng.random_range(0.5..=1.0),
            weight_bits: Some(bits(&mut rng)),
            weight_clip: rng.random_range(0.5..=1.0),
        };
        let e = quant_error(&x, &w, &q).unwrap();
        let bound = quant_error_bound(&x, &w, &q).unwrap();
        if e > bound + 1e-9 {
            violations += 1;
        }
        min_slack = min_slack.min(bound - e);
    }
    outcome(violations == 0, format!("{violations} violations in 1000 draws, min slack {min_slack:.3e}"))
}

fn c5_rtn_bound() -> Outcome {
    let mut rng = seeded_rng(5);
    let mut lines = Vec::new();
    let mut pass = true;
    for bits in [Bits::Int4, Bits::Int8] {
        let q_max = bits.q_max() as f64;
        for n in [256usize, 1024, 4096] {
            let bound = (n as f64 * std::f64::consts::PI).ln().sqrt() / q_max;
            let mut total = 0.0;
            for _ in 0..100 {
                let x = DenseMatrix::gaussian(1, n, 1.0, &mut rng);
                let xq = fake_quant_rows(&x, bits, 1.0).unwrap();
                total += x.sub(&xq).frobenius_norm() / x.frobenius_norm();
            }
            let mean = total / 100.0;
            pass &= mean <= bound;
            lines.push(format!("q{}/n{n}: {mean:.4} ≤ {bound:.4}", q_max as i32));
        }
    }
    outcome(pass, lines.join(", "))
}

fn c6_eckart_young() -> Outcome {
    let mut rng = seeded_rng(6);
    let (b, h) = (40, 12);
    let mix = DenseMatrix::gaussian(h, h, 1.0, &mut rng);
    let x = DenseMatrix::gaussian(b, h, 1.0, &mut rng).matmul(&mix);
    let (u, ev) = eig_gram(&x.gram()).unwrap();
    let sigma: Vec<f64> = ev.iter().map(|e| e.max(0.0).sqrt()).collect();
    let g_y = DenseMatrix::gaussian(b, 5, 1.0, &mut rng);
    let scale = x.matmul(&x.transpose()).frobenius_norm();

    let mut tail_err = 0.0f64;
    let mut monotone = true;
    let mut prev = f64::INFINITY;
    for r in 0..=h {
        let res = gram_approx_residual(&x, &u.col_range(0, r));
        tail_err = tail_err.max((res - singular_tail(&sigma, r)).abs() / scale);
        let e = grad_approx_error(&x, &u, r, &g_y).unwrap();
        monotone &= e <= prev + 1e-12;
        prev = e;
    }
    let mut beaten = 0;
    for i in 0..1000 {
        let r = 1 + i % (h - 1);
        let best = gram_approx_residual(&x, &u.col_range(0, r));
        let alt = random_orthonormal(h, r, &mut rng).unwrap();
        if gram_approx_residual(&x, &alt) < best - 1e-9 * scale {
            beaten += 1;
        }
    }
    outcome(
        tail_err <= 1e-9 && monotone && beaten == 0,
        format!("tail identity rel err {tail_err:.2e}, grad error monotone: {monotone}, beaten by {beaten}/1000 random bases"),
    )
}

fn outlier_model(seed: u64) -> ModelGraph {
    synth_model(&SynthSpec::with_outliers(ModelConfig::desk(), seed, 4, 100.0)).unwrap()
}

fn c7_suppression() -> Outcome {
    let fp = outlier_model(0);
    let absorbed = absorb_rmsnorm(&fp).unwrap();
    let calib = calib_tokens(256, 8, 64, 1000);
    let stats = collect_stats(&absorbed, &calib).unwrap();
    let (_, sigma) = stats.basis(BasisSource::Shared).unwrap();
    let energy = quad_core::model::energy_fraction(&sigma, 8);
    let t = transformed(&absorbed, &calib, 8, 0, true);
    let held = sample_sequences(&fp, 8, 64, 1.0, 2000).unwrap();
    let frac = suppression_fraction(&absorbed, &t, &held).unwrap();
    outcome(
        frac >= 0.9 && energy >= 0.9,
        format!("suppressed in {:.1}% of tokens, top-8 energy {energy:.4}", 100.0 * frac),
    )
}

fn c8_ablation() -> Outcome {
    let n = 100;
    let (mut wins, mut ordered) = (0, 0);
    let mut ratios = Vec::with_capacity(n);
    for seed in 0..n as u64 {
        let fp = outlier_model(seed);
        let absorbed = absorb_rmsnorm(&fp).unwrap();
        let calib = calib_tokens(256, 8, 64, seed + 1000);
        let held = sample_sequences(&fp, 8, 64, 1.0, seed + 2000).unwrap();
        let mut ppl = Vec::new();
        let mut errs = Vec::new();
        for r in [0usize, 8] {
            let t = transformed(&absorbed, &calib, r, seed, true);
            let st = collect_stats(&t, &calib).unwrap();
            let q = quantize_model(&t, &QuantScheme::w4a4(), &st).unwrap();
            ppl.push(eval_perplexity(&q, &held).unwrap());
            if r == 8 {
                errs.push(mean_layer_error(&layer_errors(&t, &q, &calib[..2]).unwrap()));
                for scheme in [QuantScheme::w4a4a8(), QuantScheme::w4a8()] {
                    let q = quantize_model(&t, &scheme, &st).unwrap();
                    errs.push(mean_layer_error(&layer_errors(&t, &q, &calib[..2]).unwrap()));
                }
            }
        }
        wins += usize::from(ppl[1] < ppl[0]);
        ratios.push(ppl[1] / ppl[0]);
        // errs = [w4a4, w4a4a8, w4a8]
        ordered += usize::from(errs[2] <= errs[1] && errs[1] <= errs[0]);
    }
    ratios.sort_by(|a, b| a.partial_cmp(b).unwrap());
    outcome(
        wins >= 90 && ordered == n,
        format!(
            "r=8 beats r=0 under W4A4 in {wins}/{n} seeds (median ppl ratio {:.3}); error ordering holds in {ordered}/{n}",
            ratios[n / 2]
        ),
    )
}

fn correlated_layer(seed: u64, b: usize, n: usize, m: usize) -> (DenseMatrix, DenseMatrix) {
    let mut rng = seeded_rng(seed);
    let mix = DenseMatrix::gaussian(n, n, 1.0 / (n as f64).sqrt(), &mut rng);
    let x = DenseMatrix::gaussian(b, n, 1.0, &mut rng).matmul(&mix);
    let w = DenseMatrix::gaussian(n, m, 1.0, &mut rng);
    (x, w)
}

fn c9_gptq() -> Outcome {
    let mut wins = 0;
    for seed in 0..100 {
        let (x, w) = correlated_layer(9000 + seed, 256, 64, 32);
        let g = x.gram();
        let e_gptq = weighted_error(&w, &dequantize_weight(&gptq_quantize(&w, &g, Bits::Int4, 1.0).unwrap()), Some(&g));
        let e_rtn = weighted_error(&w, &dequantize_weight(&rtn_quantize_weight(&w, Bits::Int4, 1.0).unwrap()), Some(&g));
        wins += usize::from(e_gptq <= e_rtn);
    }
    outcome(wins >= 95, format!("GPTQ ≤ RTN Gram-weighted error in {wins}/100 seeds"))
}

/// Pre-down-projection activations with a few heavy channels.
fn outlier_channel_layer(seed: u64) -> (DenseMatrix, DenseMatrix) {
    let mut rng = seeded_rng(seed);
    let (b, n, m) = (256, 128, 64);
    let mut x = DenseMatrix::gaussian(b, n, 1.0, &mut rng);
    for _ in 0..4 {
        let c = rng.random_range(0..n);
        let gain = rng.random_range(20.0..60.0);
        for i in 0..b {
            let v = x.get(i, c);
            x.set(i, c, v * gain);
        }
    }
    let w = DenseMatrix::gaussian(n, m, 1.0 / (n as f64).sqrt(), &mut rng);
    (x, w)
}

fn c10_lowrank() -> Outcome {
    let mut worst_identity = 0.0f64;
    for seed in 0..10 {
        let (x, w) = outlier_channel_layer(100 + seed);
        let y = x.matmul(&w);
        for k in [0, 1, 16, 64] {
            let br = build_lowrank_branch(&w, &x, k).unwrap();
            let f = forward_lowrank(&x, &br, ActBits::Full, None).unwrap();
            worst_identity = worst_identity.max(f.sub(&y).frobenius_norm() / y.frobenius_norm());
        }
    }
    let mut wins = 0;
    for seed in 0..100 {
        let (x, w) = outlier_channel_layer(10_000 + seed);
        let y = x.matmul(&w);
        let br = build_lowrank_branch(&w, &x, 16).unwrap();
        let with = forward_lowrank(&x, &br, ActBits::Int8, Some(Bits::Int4)).unwrap();
        let q = Quantizer {
            act_bits: Some(Bits::Int8),
            act_clip: 0.9,
            weight_bits: Some(Bits::Int4),
            weight_clip: 1.0,
        };
        let without = q.quantize_x(&x).unwrap().matmul(&q.quantize_w(&w).unwrap());
        wins += usize::from(with.sub(&y).frobenius_norm() < without.sub(&y).frobenius_norm());
    }
    outcome(
        worst_identity <= 1e-10 && wins >= 90,
        format!("unquantized identity rel err {worst_identity:.2e}; W4A8 branch(k=16) beats no branch in {wins}/100 seeds"),
    )
}

fn small_quad_layer(seed: u64) -> (QuadLinear, DenseMatrix, DenseMatrix) {
    let mut rng = seeded_rng(seed);
    let (r, n, m, b) = (3, 16, 6, 48);
    let w = DenseMatrix::gaussian(r + n, m, 0.5, &mut rng);
    let mut x = DenseMatrix::gaussian(b, r + n, 1.0, &mut rng);
    for i in 0..b {
        for j in 0..r {
            let v = x.get(i, j);
            x.set(i, j, 4.0 * v);
        }
    }
    let body = rtn_quantize_weight(&w.row_range(r, r + n), Bits::Int4, 1.0).unwrap();
    let q = QuadLinear::new(
        r,
        WeightBody::Quantized(body),
        Some(w.row_range(0, r)),
        ActBits::Int4,
        OnlineHadamard::None,
        None,
    )
    .unwrap();
    let y = x.matmul(&w);
    (q, x, y)
}

fn c11_peft() -> Outcome {
    // analytic W_r gradient against central differences
    let (mut worst, mut worst_s) = (0.0f64, 0.0f64);
    for seed in 0..10 {
        let (q, x, y) = small_quad_layer(300 + seed);
        let parts = q.parts(&x, 0.9).unwrap();
        let w_r = q.w_r.clone().unwrap();
        let g = loss_and_grads(&parts, q.scales(), Some(&w_r), &y, &q).w_r.unwrap();
        let h = 1e-5;
        for i in 0..w_r.rows() {
            for j in 0..w_r.cols() {
                let mut plus = w_r.clone();
                plus.set(i, j, w_r.get(i, j) + h);
                let mut minus = w_r.clone();
                minus.set(i, j, w_r.get(i, j) - h);
                let lp = loss_and_grads(&parts, q.scales(), Some(&plus), &y, &q).loss;
                let lm = loss_and_grads(&parts, q.scales(), Some(&minus), &y, &q).loss;
                let fd = (lp - lm) / (2.0 * h);
                worst = worst.max((fd - g.get(i, j)).abs() / g.get(i, j).abs().max(1e-8));
            }
        }
        let s = q.scales().unwrap().to_vec();
        let gs = loss_and_grads(&parts, Some(&s), Some(&w_r), &y, &q).scales.unwrap();
        for j in 0..s.len() {
            let h = 1e-6 * s[j];
            let mut plus = s.clone();
            plus[j] += h;
            let mut minus = s.clone();
            minus[j] -= h;
            let lp = loss_and_grads(&parts, Some(&plus), Some(&w_r), &y, &q).loss;
            let lm = loss_and_grads(&parts, Some(&minus), Some(&w_r), &y, &q).loss;
            let fd = (lp - lm) / (2.0 * h);
            worst_s = worst_s.max((fd - gs[j]).abs() / gs[j].abs().max(1e-8));
        }
    }

    let layer_cfg = TuneConfig {
        steps: 200,
        lr: 1e-3,
        ..TuneConfig::default()
    };
    let mut decreased = 0;
    for seed in 0..100 {
        let (q, x, y) = small_quad_layer(5000 + seed);
        let (_, fit) = tune_layer(&q, LinearKind::Q, &x, &y, &layer_cfg, 0.9).unwrap();
        decreased += usize::from(fit.final_loss < fit.initial_loss);
    }

    let n_models = 20;
    let mut ratios = Vec::with_capacity(n_models);
    let model_cfg = TuneConfig {
        lr: 1e-2,
        ..TuneConfig::default()
    };
    for seed in 0..n_models as u64 {
        let fp = outlier_model(seed);
        let absorbed = absorb_rmsnorm(&fp).unwrap();
        let calib = calib_tokens(256, 8, 64, seed + 1000);
        let held = sample_sequences(&fp, 16, 64, 1.0, seed + 2000).unwrap();
        let tune_seqs = sample_sequences(&fp, 32, 64, 1.0, seed + 3000).unwrap();
        let t = transformed(&absorbed, &calib, 8, seed, true);
        let st = collect_stats(&t, &calib).unwrap();
        let q = quantize_model(&t, &QuantScheme::w4a4a8(), &st).unwrap();
        let before = eval_perplexity(&q, &held).unwrap();
        let (tuned, _) = tune_model(&q, &t, &tune_seqs, &model_cfg).unwrap();
        ratios.push(eval_perplexity(&tuned, &held).unwrap() / before);
    }
    ratios.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = 0.5 * (ratios[n_models / 2 - 1] + ratios[n_models / 2]);
    outcome(
        worst <= 1e-5 && worst_s <= 1e-4 && decreased == 100 && median <= 1.0,
        format!(
            "FD rel err W_r {worst:.2e}, scales {worst_s:.2e}; layer loss decreased in {decreased}/100; median ppl ratio after/before {median:.4} over {n_models} models"
        ),
    )
}

fn read_tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn c12_determinism(started: Instant) -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut cfg = PipelineConfig::desk(a.path());
    cfg.scheme = QuantScheme::w4a4a8();
    cfg.tune = Some(TuneConfig {
        steps: 20,
        lr: 1e-2,
        ..TuneConfig::default()
    });
    run_pipeline(&cfg).unwrap();
    cfg.output_dir = b.path().to_path_buf();
    run_pipeline(&cfg).unwrap();
    let (ta, tb) = (read_tree(a.path()), read_tree(b.path()));
    let identical = ta == tb;
    let elapsed = started.elapsed().as_secs_f64();
    outcome(
        identical && elapsed < 900.0,
        format!("{} files byte-identical: {identical}; acceptance runtime {elapsed:.0} s (budget 900 s)", ta.len()),
    )
}

fn main() {
    // the test harness passes filter arguments; a filter that names no
    // criterion skips the suite
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |n: usize| args.is_empty() || args.iter().any(|a| a == &format!("c{n}") || a == "acceptance");
    let started = Instant::now();
    let criteria: Vec<Criterion> = vec![
        (1, "orthogonality of P", Box::new(c1_orthogonality)),
        (2, "equivalence transformation", Box::new(c2_equivalence)),
        (3, "fast Hadamard", Box::new(c3_hadamard)),
        (4, "quantization error bound", Box::new(c4_error_bound)),
        (5, "RTN error statistical bound", Box::new(c5_rtn_bound)),
        (6, "Eckart-Young / gradient approximation", Box::new(c6_eckart_young)),
        (7, "outlier suppression", Box::new(c7_suppression)),
        (8, "directional ablation", Box::new(c8_ablation)),
        (9, "GPTQ vs RTN", Box::new(c9_gptq)),
        (10, "low-rank branch", Box::new(c10_lowrank)),
        (11, "parameter-efficient tuning", Box::new(c11_peft)),
        (12, "pipeline determinism", Box::new(move || c12_determinism(started))),
    ];
    let mut failed = 0;
    let mut ran = 0;
    for (n, name, run) in &criteria {
        if !wanted(*n) {
            continue;
        }
        ran += 1;
        let t = Instant::now();
        let o = run();
        let status = if o.pass { "PASS" } else { "FAIL" };
        println!("[{status}] {n:>2}. {name}: {} ({:.1} s)", o.detail, t.elapsed().as_secs_f64());
        failed += usize::from(!o.pass);
    }
    println!("acceptance: {}/{ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
