mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::small_config;
use varinv::config::ExperimentConfig;
use varinv::error::{EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE};

fn varinv(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_varinv"))
        .args(["--config", dir.join("cfg.json").to_str().unwrap()])
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn write_cfg(dir: &Path, c: &ExperimentConfig) {
    std::fs::write(dir.join("cfg.json"), c.to_json()).unwrap();
}

fn ok(o: &Output) -> String {
    assert!(o.status.success(), "exit {:?}: {}", o.status.code(), String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

/// Structured stderr line of a failed command.
fn error_kind(o: &Output) -> String {
    let line = String::from_utf8_lossy(&o.stderr).lines().last().unwrap_or_default().to_string();
    let v: serde_json::Value = serde_json::from_str(&line).unwrap_or_else(|_| panic!("not JSON: {line}"));
    assert_eq!(v["exit_code"].as_i64().unwrap() as i32, code(o));
    v["error"].as_str().unwrap().to_string()
}

fn pipeline(dir: &Path, threads: &str) -> Vec<u8> {
    write_cfg(dir, &small_config(dir, 4));
    let t = ["--threads", threads];
    ok(&varinv(dir, &[&["generate"][..], &t].concat()));
    ok(&varinv(dir, &[&["baseline-oi"][..], &t].concat()));
    for m in ["var-sst", "var-ssh", "direct"] {
        ok(&varinv(dir, &[&["train", "--method", m][..], &t].concat()));
    }
    for m in ["var-sst", "var-ssh", "direct", "oi"] {
        ok(&varinv(dir, &[&["reconstruct", "--method", m][..], &t].concat()));
    }
    let table = ok(&varinv(dir, &[&["evaluate"][..], &t].concat()));
    assert_eq!(table.lines().count(), 4, "{table}");
    for m in ["var-sst", "var-ssh", "direct", "oi"] {
        assert!(table.contains(m));
    }
    std::fs::read(dir.join("scores.json")).unwrap()
}

#[test]
fn full_pipeline_is_byte_reproducible_across_runs_and_thread_counts() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let sa = pipeline(a.path(), "1");
    let sb = pipeline(b.path(), "2");
    assert_eq!(sa, sb);
    for f in ["truth.fstk", "oi.fstk", "checkpoint-var-sst.pstk", "recon-direct.fstk"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    // every command left a manifest naming its outputs
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(a.path().join("manifest-train-var-sst.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 4);
    assert!(m["outputs"]["checkpoint-var-sst.pstk"].as_str().unwrap().len() == 64);
    // the learned feature maps come from the trained checkpoint
    assert!(ok(&varinv(a.path(), &["features"])).contains("feature maps"));
    assert!(a.path().join("features.fstk").exists());
}

#[test]
fn evaluating_the_truth_gives_perfect_scores() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let c = small_config(d, 2);
    write_cfg(d, &c);
    ok(&varinv(d, &["generate"]));
    let truth = d.join("truth.fstk");
    ok(&varinv(d, &["evaluate", "--estimate", truth.to_str().unwrap()]));
    let s: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("scores.json")).unwrap()).unwrap();
    assert_eq!(s[0]["mu"], 1.0);
    assert_eq!(s[0]["sigma"], 0.0);
    let lx = s[0]["lambda_x"].as_f64().unwrap();
    assert!((lx - 2.0 * c.synth.grid.dx).abs() < 1e-12, "{lx}");
    assert!(d.join("nsr-estimate-x.csv").exists());
}

#[test]
fn config_errors_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut v: serde_json::Value = serde_json::from_str(&small_config(d, 1).to_json()).unwrap();
    v["extra_section"] = 1.into();
    std::fs::write(d.join("cfg.json"), v.to_string()).unwrap();
    let o = varinv(d, &["generate"]);
    assert_eq!((code(&o), error_kind(&o).as_str()), (EXIT_CONFIG, "config"));
    std::fs::write(d.join("cfg.json"), "{ not json").unwrap();
    assert_eq!(code(&varinv(d, &["generate"])), EXIT_CONFIG);
    std::fs::remove_file(d.join("cfg.json")).unwrap();
    assert_eq!(code(&varinv(d, &["generate"])), EXIT_CONFIG);
    write_cfg(d, &small_config(d, 1));
    assert_eq!(code(&varinv(d, &["generate", "--threads", "0"])), EXIT_CONFIG);
    assert_eq!(code(&varinv(d, &["no-such-command"])), EXIT_CONFIG);
    assert_eq!(code(&varinv(d, &["train"])), EXIT_CONFIG);
}

#[test]
fn missing_and_tampered_artifacts_exit_with_code_3() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_cfg(d, &small_config(d, 1));
    let o = varinv(d, &["baseline-oi"]);
    assert_eq!((code(&o), error_kind(&o).as_str()), (EXIT_DATA, "missing_artifact"));
    ok(&varinv(d, &["generate"]));
    let o = varinv(d, &["train", "--method", "direct"]);
    assert_eq!((code(&o), error_kind(&o).as_str()), (EXIT_DATA, "missing_artifact"));
    let obs = d.join("obs.fstk");
    let mut bytes = std::fs::read(&obs).unwrap();
    let n = bytes.len();
    bytes[n - 1] ^= 1;
    std::fs::write(&obs, &bytes).unwrap();
    let o = varinv(d, &["baseline-oi"]);
    assert_eq!((code(&o), error_kind(&o).as_str()), (EXIT_DATA, "hash_mismatch"));
    // regenerating restores a consistent chain
    ok(&varinv(d, &["generate"]));
    ok(&varinv(d, &["baseline-oi"]));
    std::fs::write(d.join("bad.fstk"), b"{\"magic\":\"NOPE\"}\n").unwrap();
    let o = varinv(d, &["evaluate", "--estimate", d.join("bad.fstk").to_str().unwrap()]);
    assert_eq!((code(&o), error_kind(&o).as_str()), (EXIT_DATA, "bad_magic"));
}

#[test]
fn non_finite_training_exits_with_code_4() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut c = small_config(d, 1);
    c.solver.mode = varinv_core::solver::SolverMode::Gd { step: 1e200 };
    write_cfg(d, &c);
    ok(&varinv(d, &["generate"]));
    ok(&varinv(d, &["baseline-oi"]));
    let o = varinv(d, &["train", "--method", "var-sst"]);
    assert_eq!(code(&o), EXIT_DIVERGENCE, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn gradcheck_passes_on_the_default_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_varinv")).args(["--out-dir", dir.path().to_str().unwrap(), "gradcheck"]).output().unwrap();
    let text = ok(&out);
    assert!(!text.contains("FAIL"));
    assert!(text.lines().count() >= 25, "{text}");
    assert!(dir.path().join("gradcheck.json").exists());
}
