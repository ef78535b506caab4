mod common;

use common::small_config;
use varinv::checkpoint::{decode, encode, load, save};
use varinv::config::Method;
use varinv::error::AppError;
use varinv::exec::Pool;
use varinv::pipeline::{self, checkpoint_name, Ctx};
use varinv_core::train::{evaluate, Sequential};

fn ctx(dir: &std::path::Path, epochs: usize) -> Ctx {
    let mut c = small_config(dir, 3);
    c.train.epochs = epochs;
    c.direct.train.epochs = epochs;
    let ctx = Ctx::new(c, Pool::new(Some(1)).unwrap()).unwrap();
    pipeline::generate(&ctx).unwrap();
    pipeline::baseline_oi(&ctx).unwrap();
    ctx
}

#[test]
fn round_trip_reproduces_the_validation_loss_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let ctx = ctx(dir.path(), 2);
    let state = pipeline::train(&ctx, Method::VarSst, false).unwrap();
    let path = dir.path().join("copy.pstk");
    save(&path, &state).unwrap();
    let back = load(&path).unwrap();
    assert_eq!(back, state);
    let model = ctx.cfg.model(Method::VarSst).unwrap();
    let val = pipeline::datasets(&ctx, Method::VarSst).unwrap().val;
    let w = &ctx.cfg.train.weights;
    let a = evaluate(&Sequential, &model, &state.params, &val, w).unwrap();
    let b = evaluate(&Sequential, &model, &back.params, &val, w).unwrap();
    assert_eq!((a.0.to_bits(), a.1.to_bits()), (b.0.to_bits(), b.1.to_bits()));
    assert_eq!(back.best_val.map(f64::to_bits), state.best_val.map(f64::to_bits));
}

#[test]
fn resuming_from_a_checkpoint_matches_an_uninterrupted_run() {
    let full = tempfile::tempdir().unwrap();
    let straight = pipeline::train(&ctx(full.path(), 3), Method::Direct, false).unwrap();
    let part = tempfile::tempdir().unwrap();
    let c1 = ctx(part.path(), 1);
    pipeline::train(&c1, Method::Direct, false).unwrap();
    let mut cfg = c1.cfg.clone();
    cfg.direct.train.epochs = 3;
    cfg.train.epochs = 3;
    let c3 = Ctx::new(cfg, Pool::new(Some(1)).unwrap()).unwrap();
    let resumed = pipeline::train(&c3, Method::Direct, true).unwrap();
    assert_eq!(resumed, straight);
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let ctx = ctx(dir.path(), 1);
    pipeline::train(&ctx, Method::Direct, false).unwrap();
    let bytes = std::fs::read(dir.path().join(checkpoint_name(Method::Direct))).unwrap();
    let p = std::path::Path::new("c.pstk");
    assert!(decode(&bytes, p).is_ok());
    assert!(matches!(decode(&bytes[..bytes.len() - 8], p), Err(AppError::Truncated { .. })));
    let text = String::from_utf8_lossy(&bytes).replacen("PSTK1", "FSTK1", 1);
    let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
    let mut swapped = text.as_bytes()[..nl].to_vec();
    swapped.extend_from_slice(&bytes[nl..]);
    assert!(matches!(decode(&swapped, p), Err(AppError::BadMagic { .. })));
    let state = decode(&bytes, p).unwrap();
    assert_eq!(decode(&encode(&state), p).unwrap(), state);
}
