//! The experiment stages behind each command. Every stage reads its inputs
//! from the output directory, checks them against upstream manifests and
//! writes its own manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use varinv_core::baselines::optimal_interp;
use varinv_core::diagnostics::{model_checks, primitive_checks, CheckRow};
use varinv_core::fields::{FieldStack, ObsModality, StateSeq};
use varinv_core::metrics::{resolved_scale, score, Axis, ScoreReport};
use varinv_core::obsops::feature_pair_residual;
use varinv_core::osse::{make_dataset, split_windows, Splits, TrainSample};
use varinv_core::train::{model_init, reconstruct as run_model, train_loop, Executor, TrainState};

use crate::checkpoint;
use crate::config::{ExperimentConfig, Method};
use crate::error::{AppError, Result};
use crate::exec::Pool;
use crate::fstk::{read_fstk, take, write_fstk, Fields};
use crate::manifest::{sha256_hex, verify, Manifest};
use crate::report;

pub const TRUTH: &str = "truth.fstk";
pub const SST: &str = "sst.fstk";
pub const MASKS: &str = "masks.fstk";
pub const OBS: &str = "obs.fstk";
pub const OI: &str = "oi.fstk";
pub const SCORES: &str = "scores.json";
pub const GRADCHECK: &str = "gradcheck.json";
pub const FEATURES: &str = "features.fstk";

pub fn checkpoint_name(m: Method) -> String {
    format!("checkpoint-{}.pstk", m.name())
}

pub fn recon_name(m: Method) -> String {
    format!("recon-{}.fstk", m.name())
}

/// Resolved config, output directory and worker pool shared by the stages.
pub struct Ctx {
    pub cfg: ExperimentConfig,
    pub dir: PathBuf,
    pub config_sha256: String,
    pub pool: Pool,
}

impl Ctx {
    pub fn new(cfg: ExperimentConfig, pool: Pool) -> Result<Self> {
        cfg.validate()?;
        let dir = cfg.out_dir.clone();
        std::fs::create_dir_all(&dir).map_err(AppError::io(&dir))?;
        let config_sha256 = sha256_hex(cfg.to_json().as_bytes());
        Ok(Ctx { cfg, dir, config_sha256, pool })
    }

    fn manifest(&self, command: &str) -> Manifest {
        Manifest::new(command, &self.config_sha256, self.cfg.seed)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn read_checked(&self, upstream: &str, name: &str) -> Result<Fields> {
        verify(&self.dir, upstream, name, &self.config_sha256)?;
        read_fstk(&self.path(name))
    }

    fn field(&self, upstream: &str, file: &str, field: &str) -> Result<FieldStack> {
        take(&mut self.read_checked(upstream, file)?, field, &self.path(file))
    }
}

fn single(name: &str, f: FieldStack) -> Fields {
    Fields::from([(name.to_string(), f)])
}

pub fn generate(ctx: &Ctx) -> Result<Splits> {
    let cfg = &ctx.cfg;
    let o = varinv_core::osse::generate(&cfg.synth, &cfg.masks)?;
    let splits = split_windows(cfg.synth.grid.n_t, &cfg.split)?;
    write_fstk(&ctx.path(TRUTH), &single("ssh", o.truth))?;
    write_fstk(&ctx.path(SST), &single("sst", o.sst))?;
    write_fstk(&ctx.path(MASKS), &single("mask", o.masks))?;
    let obs = Fields::from([("y1".to_string(), o.y1.values().clone()), ("mask".to_string(), o.y1.mask().clone())]);
    write_fstk(&ctx.path(OBS), &obs)?;
    let mut m = ctx.manifest("generate");
    for f in [TRUTH, SST, MASKS, OBS] {
        m.add_output(&ctx.dir, f)?;
    }
    m.extra = serde_json::json!({ "splits": splits, "sst_scale": o.sst_scale });
    m.write(&ctx.dir)?;
    Ok(splits)
}

fn load_y1(ctx: &Ctx) -> Result<ObsModality> {
    let mut obs = ctx.read_checked("generate", OBS)?;
    let path = ctx.path(OBS);
    Ok(ObsModality::new(1, take(&mut obs, "y1", &path)?, take(&mut obs, "mask", &path)?)?)
}

pub fn baseline_oi(ctx: &Ctx) -> Result<FieldStack> {
    let y1 = load_y1(ctx)?;
    let est = ctx.pool.install(|| optimal_interp(&y1, &ctx.cfg.oi))?;
    write_fstk(&ctx.path(OI), &single("ssh", est.clone()))?;
    let mut m = ctx.manifest("baseline-oi");
    m.add_input(&ctx.dir, OBS)?;
    m.add_output(&ctx.dir, OI)?;
    m.write(&ctx.dir)?;
    Ok(est)
}

/// Windowed samples per split for one method.
pub struct Datasets {
    pub train: Vec<TrainSample>,
    pub val: Vec<TrainSample>,
    pub test: Vec<TrainSample>,
}

pub fn datasets(ctx: &Ctx, m: Method) -> Result<Datasets> {
    let truth = ctx.field("generate", TRUTH, "ssh")?;
    let y1 = load_y1(ctx)?;
    let y2 = ctx.field("baseline-oi", OI, "ssh")?;
    let sst = if m.uses_sst(&ctx.cfg) { Some(ctx.field("generate", SST, "sst")?) } else { None };
    let sp = split_windows(truth.grid().n_t, &ctx.cfg.split)?;
    let w = ctx.cfg.split.window;
    let build = |starts: &[usize]| make_dataset(&truth, &y1, &y2, sst.as_ref(), starts, w);
    Ok(Datasets { train: build(&sp.train)?, val: build(&sp.val)?, test: build(&sp.test)? })
}

fn ensure_trainable(m: Method) -> Result<()> {
    if m.trainable() {
        Ok(())
    } else {
        Err(AppError::Config("oi has no training stage; run baseline-oi".into()))
    }
}

/// Trains `m` from its seeded initialisation (or from its checkpoint when
/// `resume`), saving the checkpoint after every epoch.
pub fn train(ctx: &Ctx, m: Method, resume: bool) -> Result<TrainState> {
    ensure_trainable(m)?;
    let cfg = &ctx.cfg;
    let model = cfg.model(m)?;
    let tc = cfg.train_config(m);
    let data = datasets(ctx, m)?;
    let ckpt = ctx.path(&checkpoint_name(m));
    let state = if resume && ckpt.exists() {
        checkpoint::load(&ckpt)?
    } else {
        TrainState::new(model_init(&model, cfg.split.window, cfg.init_seed(m))?)
    };
    let name = m.name();
    let mut save_err = None;
    let mut on_epoch = |s: &TrainState| {
        let h = s.history.last().expect("epoch recorded");
        match (h.val_loss, h.val_mu) {
            (Some(l), Some(mu)) => log::info!("{name} epoch {}: train {:.4e}, val {l:.4e}, val mu {mu:.4}", h.epoch, h.train_loss),
            _ => log::info!("{name} epoch {}: train {:.4e}", h.epoch, h.train_loss),
        }
        checkpoint::save(&ckpt, s).map_err(|e| {
            let msg = e.to_string();
            save_err = Some(e);
            varinv_core::Error::Usage(msg)
        })
    };
    let trained = train_loop(&ctx.pool, &model, tc, &data.train, &data.val, state, &mut on_epoch);
    if let Some(e) = save_err {
        return Err(e);
    }
    let state = trained?;
    checkpoint::save(&ckpt, &state)?;
    let hist = format!("history-{name}.csv");
    report::write_history(&ctx.path(&hist), &state.history)?;
    let mut man = ctx.manifest(&format!("train-{name}"));
    for f in [TRUTH, OBS, OI] {
        man.add_input(&ctx.dir, f)?;
    }
    if m.uses_sst(cfg) {
        man.add_input(&ctx.dir, SST)?;
    }
    man.add_output(&ctx.dir, &checkpoint_name(m))?;
    man.add_output(&ctx.dir, &hist)?;
    man.write(&ctx.dir)?;
    Ok(state)
}

/// For each day of `block`, the window whose centre is nearest (earliest on
/// ties) supplies the frame.
pub fn assemble(starts: &[usize], recons: &[FieldStack], window: usize, block: [usize; 2]) -> Result<FieldStack> {
    let mut frames = Vec::with_capacity(block[1] - block[0]);
    for d in block[0]..block[1] {
        let centre = |s: usize| (2 * s + window - 1).abs_diff(2 * d);
        let i = (0..starts.len())
            .filter(|&i| starts[i] <= d && d < starts[i] + window)
            .min_by_key(|&i| centre(starts[i]))
            .ok_or_else(|| AppError::Config(format!("no test window covers day {d}")))?;
        frames.push(recons[i].frames(d - starts[i], 1)?);
    }
    Ok(FieldStack::concat_frames(&frames)?)
}

fn load_params(ctx: &Ctx, m: Method) -> Result<TrainState> {
    let name = checkpoint_name(m);
    verify(&ctx.dir, &format!("train-{}", m.name()), &name, &ctx.config_sha256)?;
    checkpoint::load(&ctx.path(&name))
}

/// Test-block reconstruction for `m`, written to its `recon-*.fstk`.
pub fn reconstruct(ctx: &Ctx, m: Method) -> Result<FieldStack> {
    let block = ctx.cfg.split.test_block;
    let mut man = ctx.manifest(&format!("reconstruct-{}", m.name()));
    let est = if m == Method::Oi {
        man.add_input(&ctx.dir, OI)?;
        ctx.field("baseline-oi", OI, "ssh")?.frames(block[0], block[1] - block[0])?
    } else {
        let model = ctx.cfg.model(m)?;
        let state = load_params(ctx, m)?;
        let data = datasets(ctx, m)?;
        let outs = ctx.pool.map(&data.test, |s| run_model(&model, &state.best_params, s)).into_iter().collect::<std::result::Result<Vec<_>, _>>()?;
        let starts: Vec<usize> = data.test.iter().map(|s| s.start).collect();
        let (recons, traces): (Vec<_>, Vec<_>) = outs.into_iter().unzip();
        if matches!(m, Method::VarSst | Method::VarSsh) {
            let name = format!("trace-{}.csv", m.name());
            report::write_traces(&ctx.path(&name), &starts.iter().copied().zip(traces).collect::<Vec<_>>())?;
            man.add_output(&ctx.dir, &name)?;
        }
        man.add_input(&ctx.dir, &checkpoint_name(m))?;
        assemble(&starts, &recons, ctx.cfg.split.window, block)?
    };
    let name = recon_name(m);
    write_fstk(&ctx.path(&name), &single("ssh", est.clone()))?;
    man.add_output(&ctx.dir, &name)?;
    man.write(&ctx.dir)?;
    Ok(est)
}

/// One row of the comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodScore {
    pub method: String,
    #[serde(flatten)]
    pub score: ScoreReport,
}

pub fn table_row(s: &MethodScore) -> String {
    let flag = |u: bool| if u { ">" } else { " " };
    format!(
        "{:<8} mu {:.3}  sigma {:.3}  lambda_x {}{:.3}  lambda_t {}{:.2}",
        s.method,
        s.score.mu,
        s.score.sigma,
        flag(s.score.lambda_x_unresolved),
        s.score.lambda_x,
        flag(s.score.lambda_t_unresolved),
        s.score.lambda_t
    )
}

fn score_with_curves(ctx: &Ctx, label: &str, est: &FieldStack, truth: &FieldStack) -> Result<MethodScore> {
    for (axis, tag) in [(Axis::X, "x"), (Axis::T, "t")] {
        report::write_nsr(&ctx.path(&format!("nsr-{label}-{tag}.csv")), &resolved_scale(est, truth, axis)?)?;
    }
    Ok(MethodScore { method: label.into(), score: score(est, truth)? })
}

/// Truth frames matching `est`: the whole record or the test block.
fn truth_for(ctx: &Ctx, est: &FieldStack, path: &Path) -> Result<FieldStack> {
    let truth = ctx.field("generate", TRUTH, "ssh")?;
    let block = ctx.cfg.split.test_block;
    let n = est.grid().n_t;
    if n == truth.grid().n_t {
        Ok(truth)
    } else if n == block[1] - block[0] {
        Ok(truth.frames(block[0], n)?)
    } else {
        Err(AppError::Dims {
            path: path.into(),
            msg: format!("{n} frames match neither the record ({}) nor the test block ({})", truth.grid().n_t, block[1] - block[0]),
        })
    }
}

/// Scores each method's reconstruction (or one external estimate) and writes
/// `scores.json` with the NSR curves.
pub fn evaluate(ctx: &Ctx, methods: &[Method], estimate: Option<(&Path, Option<&str>)>) -> Result<Vec<MethodScore>> {
    let mut man = ctx.manifest("evaluate");
    man.add_input(&ctx.dir, TRUTH)?;
    let mut out = vec![];
    if let Some((path, field)) = estimate {
        let mut fields = read_fstk(path)?;
        let est = match field {
            Some(f) => take(&mut fields, f, path)?,
            None if fields.len() == 1 => fields.into_values().next().expect("one field"),
            None => return Err(AppError::Dims { path: path.into(), msg: "several fields; pick one with --field".into() }),
        };
        out.push(score_with_curves(ctx, "estimate", &est, &truth_for(ctx, &est, path)?)?);
    } else {
        for &m in methods {
            let name = recon_name(m);
            let est = ctx.field(&format!("reconstruct-{}", m.name()), &name, "ssh")?;
            man.add_input(&ctx.dir, &name)?;
            out.push(score_with_curves(ctx, m.name(), &est, &truth_for(ctx, &est, &ctx.path(&name))?)?);
        }
    }
    let text = serde_json::to_string_pretty(&out).expect("scores serialize") + "\n";
    std::fs::write(ctx.path(SCORES), text).map_err(AppError::io(ctx.path(SCORES)))?;
    man.add_output(&ctx.dir, SCORES)?;
    for s in &out {
        for tag in ["x", "t"] {
            man.add_output(&ctx.dir, &format!("nsr-{}-{tag}.csv", s.method))?;
        }
    }
    man.write(&ctx.dir)?;
    Ok(out)
}

/// Finite-difference checks of every primitive and model component.
pub fn gradcheck(ctx: &Ctx) -> Result<Vec<CheckRow>> {
    let mut rows = primitive_checks()?;
    rows.extend(model_checks(&ctx.cfg.cost, &ctx.cfg.solver, ctx.cfg.gradcheck_width)?);
    let json: Vec<_> = rows.iter().map(|r| serde_json::json!({ "name": r.name, "error": r.error, "tol": r.tol, "pass": r.pass() })).collect();
    let text = serde_json::to_string_pretty(&json).expect("rows serialize") + "\n";
    std::fs::write(ctx.path(GRADCHECK), text).map_err(AppError::io(ctx.path(GRADCHECK)))?;
    let mut man = ctx.manifest("gradcheck");
    man.add_output(&ctx.dir, GRADCHECK)?;
    man.write(&ctx.dir)?;
    Ok(rows)
}

/// Learned feature maps of the trained SSH+SST model on the first test
/// window: `sst.*` from the SST branch, `ssh.*` from the reconstructed state.
pub fn features(ctx: &Ctx) -> Result<Fields> {
    let m = Method::VarSst;
    let state = load_params(ctx, m)?;
    let data = datasets(ctx, m)?;
    let sample = data.test.first().ok_or_else(|| AppError::Config("empty test split".into()))?;
    let (est, _) = run_model(&ctx.cfg.model(m)?, &state.best_params, sample)?;
    let g = *sample.truth.grid();
    let y3 = sample.obs.require(3)?;
    let zero_state = StateSeq::zeros(g);
    let blank = ObsModality::full(3, FieldStack::zeros(g));
    let est_state = StateSeq::new(FieldStack::zeros(g), est)?;
    let mut out = Fields::new();
    for spec in ctx.cfg.feature_terms() {
        let a = feature_pair_residual(y3, &zero_state, &state.best_params, &spec)?;
        // zero SST isolates the state branch; the residual carries it negated
        let b = feature_pair_residual(&blank, &est_state, &state.best_params, &spec)?;
        for (tag, t, sign) in [("sst", a, 1.0), ("ssh", b, -1.0)] {
            for (f, plane) in split_features(&t, g.n_t, sign).into_iter().enumerate() {
                out.insert(format!("{tag}.{}.{f}", spec.id()), FieldStack::new(g, plane)?);
            }
        }
    }
    write_fstk(&ctx.path(FEATURES), &out)?;
    let mut man = ctx.manifest("features");
    man.add_input(&ctx.dir, &checkpoint_name(m))?;
    man.add_output(&ctx.dir, FEATURES)?;
    man.write(&ctx.dir)?;
    Ok(out)
}

/// `[T, F, H, W]` to one `T`-frame stack per feature.
fn split_features(t: &varinv_core::gradcore::Tensor, n_t: usize, sign: f64) -> Vec<Vec<f32>> {
    let s = t.shape();
    let (nf, plane) = (s.c(), s.plane());
    (0..nf)
        .map(|f| (0..n_t).flat_map(|k| t.data()[(k * nf + f) * plane..(k * nf + f + 1) * plane].iter().map(move |v| (sign * v) as f32)).collect())
        .collect()
}

/// Scores of the full desk comparison.
pub fn desk_experiment(ctx: &Ctx) -> Result<BTreeMap<Method, ScoreReport>> {
    generate(ctx)?;
    baseline_oi(ctx)?;
    for &m in &ctx.cfg.eval.methods {
        if m.trainable() {
            train(ctx, m, false)?;
        }
        reconstruct(ctx, m)?;
    }
    let scores = evaluate(ctx, &ctx.cfg.eval.methods, None)?;
    Ok(ctx.cfg.eval.methods.iter().copied().zip(scores.into_iter().map(|s| s.score)).collect())
}
