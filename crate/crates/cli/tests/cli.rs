use std::path::Path;
use std::process::{Command, Output};

fn quad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_quad"))
        .args(args)
        .env("QUAD_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = quad(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).display().to_string()
}

#[test]
fn staged_commands_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(&["synth-model", "--config", "tiny", "--seed", "3", "--outlier-rank", "2", "--outlier-gain", "50", "--out", &p(d, "fp")]);
    ok(&["calibrate", "--model", &p(d, "fp"), "--calib", "uniform:1", "--n-seqs", "4", "--seq-len", "16", "--out", &p(d, "fp.gram")]);
    ok(&["transform", "--model", &p(d, "fp"), "--gram", &p(d, "fp.gram"), "--rank", "2", "--seed", "5", "--out", &p(d, "t")]);
    assert!(d.join("t/transform.json").is_file());
    ok(&["calibrate", "--model", &p(d, "t"), "--calib", "uniform:1", "--n-seqs", "4", "--seq-len", "16", "--out", &p(d, "t.gram")]);
    ok(&["quantize", "--model", &p(d, "t"), "--gram", &p(d, "t.gram"), "--scheme", "w4a4a8", "--out", &p(d, "q")]);
    ok(&[
        "tune", "--model", &p(d, "q"), "--teacher", &p(d, "t"), "--calib", "sample:9", "--n-seqs", "4", "--seq-len", "16",
        "--steps", "5", "--out", &p(d, "q2"),
    ]);
    let json = ok(&["eval", "--model", &p(d, "q2"), "--calib", "sample:2", "--n-seqs", "2", "--seq-len", "16", "--reference", &p(d, "t")]);
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert!(v["perplexity"].as_f64().unwrap() > 1.0);
    assert_eq!(v["layer_errors"].as_array().unwrap().len(), 14);
}

#[test]
fn lowrank_replaces_online_hadamard() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(&["synth-model", "--config", "tiny", "--out", &p(d, "fp")]);
    ok(&["calibrate", "--model", &p(d, "fp"), "--calib", "uniform:1", "--n-seqs", "4", "--seq-len", "16", "--out", &p(d, "g")]);
    ok(&["transform", "--model", &p(d, "fp"), "--gram", &p(d, "g"), "--rank", "2", "--replace-hadamard", "lowrank:4", "--out", &p(d, "t")]);
    ok(&["calibrate", "--model", &p(d, "t"), "--calib", "uniform:1", "--n-seqs", "4", "--seq-len", "16", "--out", &p(d, "tg")]);
    ok(&["quantize", "--model", &p(d, "t"), "--gram", &p(d, "tg"), "--scheme", "w4a4a8", "--replace-hadamard", "lowrank:4", "--out", &p(d, "q")]);
    ok(&["eval", "--model", &p(d, "q"), "--calib", "uniform:3", "--n-seqs", "2", "--seq-len", "8"]);
}

#[test]
fn exit_codes_follow_failure_kind() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(quad(&["quantize", "--model", "x", "--gram", "y", "--scheme", "w2a2", "--out", "z"]).status.code(), Some(2));
    ok(&["synth-model", "--config", "tiny", "--out", &p(d, "fp")]);
    let bad_rank = quad(&["calibrate", "--model", &p(d, "fp"), "--calib", "bogus:1", "--out", &p(d, "g")]);
    assert_eq!(bad_rank.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad_rank.stderr).contains("unknown token source"));

    ok(&["calibrate", "--model", &p(d, "fp"), "--calib", "uniform:1", "--n-seqs", "4", "--seq-len", "16", "--out", &p(d, "g")]);
    ok(&["transform", "--model", &p(d, "fp"), "--gram", &p(d, "g"), "--rank", "2", "--out", &p(d, "t")]);
    ok(&["calibrate", "--model", &p(d, "t"), "--calib", "uniform:1", "--n-seqs", "4", "--seq-len", "16", "--out", &p(d, "tg")]);
    ok(&["quantize", "--model", &p(d, "t"), "--gram", &p(d, "tg"), "--out", &p(d, "q")]);
    let diverged = quad(&[
        "tune", "--model", &p(d, "q"), "--teacher", &p(d, "t"), "--calib", "uniform:1", "--n-seqs", "4", "--seq-len", "16",
        "--lr", "1000", "--out", &p(d, "q2"),
    ]);
    assert_eq!(diverged.status.code(), Some(3), "{}", String::from_utf8_lossy(&diverged.stderr));
    assert_eq!(quad(&["eval", "--model", &p(d, "missing"), "--calib", "uniform:1"]).status.code(), Some(1));
}

#[test]
fn run_and_ablate_from_config() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = serde_json::json!({
        "schema_version": 1,
        "model": {"kind": "synthetic", "config": {
            "hidden_size": 16, "n_heads": 2, "head_dim": 8, "intermediate_size": 32,
            "n_layers": 2, "vocab_size": 32, "rms_eps": 1e-6}, "seed": 1,
            "outlier": {"rank": 2, "gain": 50.0}},
        "calib": {"source": {"kind": "synthetic", "seed": 4}, "n_samples": 4, "seq_len": 16},
        "eval": {"n_seqs": 2, "seq_len": 16, "seed": 5},
        "rank": 2,
        "rotation_seed": 0,
        "scheme": {"u_act_bits": 4, "d_act_bits": 8, "weight_bits": 4, "act_clip": 0.9,
                   "weight_clip_grid": [1.0, 0.9]},
        "output_dir": "run"
    });
    std::fs::write(d.join("cfg.json"), cfg.to_string()).unwrap();
    let stdout = ok(&["run", "--config", &p(d, "cfg.json")]);
    assert!(stdout.contains("perplexity"));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("run/report.json")).unwrap()).unwrap();
    assert!(report["equivalence_deviation"].as_f64().unwrap() < 1e-6);
    assert!(d.join("run/summary.csv").is_file());

    let csv = ok(&["ablate", "--config", &p(d, "cfg.json"), "--variants", "fp,r0:w4a4,r2:w4a4"]);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "variant,perplexity,mean_layer_error,outlier_energy_fraction");
    assert_eq!(lines.len(), 4);
    assert!(lines[3].starts_with("r2:w4a4,"));
}
