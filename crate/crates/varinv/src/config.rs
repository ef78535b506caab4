//! Declarative experiment configuration (JSON).
//!
//! Section seeds follow from the top-level `seed`: an absent (zero) section
//! seed takes the derived value, any other value must equal it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use varinv_core::baselines::OIConfig;
use varinv_core::obsops::TermKind;
use varinv_core::osse::{MaskConfig, SplitConfig, SynthConfig};
use varinv_core::priornet::PhiConfig;
use varinv_core::solver::SolverConfig;
use varinv_core::train::{ModelSpec, TrainConfig};
use varinv_core::varcost::CostConfig;

use crate::error::{AppError, Result};

/// Reconstruction methods compared by `evaluate`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Trained variational model with SSH and SST terms.
    VarSst,
    /// The same model without the SST term.
    VarSsh,
    /// U-Net mapping stacked observations straight to SSH.
    Direct,
    /// Optimal interpolation of the altimetry.
    Oi,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::VarSst, Method::VarSsh, Method::Direct, Method::Oi];

    pub fn name(self) -> &'static str {
        match self {
            Method::VarSst => "var-sst",
            Method::VarSsh => "var-ssh",
            Method::Direct => "direct",
            Method::Oi => "oi",
        }
    }

    pub fn trainable(self) -> bool {
        self != Method::Oi
    }

    pub fn uses_sst(self, cfg: &ExperimentConfig) -> bool {
        match self {
            Method::VarSst => true,
            Method::VarSsh | Method::Oi => false,
            Method::Direct => cfg.direct.use_sst,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirectConfig {
    pub net: PhiConfig,
    pub use_sst: bool,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub methods: Vec<Method>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    pub masks: MaskConfig,
    pub split: SplitConfig,
    pub oi: OIConfig,
    /// Cost of the SSH+SST model; the SSH-only variant drops its SST terms.
    pub cost: CostConfig,
    pub solver: SolverConfig,
    pub train: TrainConfig,
    pub direct: DirectConfig,
    pub eval: EvalConfig,
    pub out_dir: PathBuf,
    /// Largest feature or hidden width used by `gradcheck`.
    pub gradcheck_width: usize,
}

/// Offsets from the top-level seed for every seeded stage.
pub mod seeds {
    pub const SYNTH: u64 = 0;
    pub const MASKS: u64 = 1;
    pub const TRAIN: u64 = 2;
    pub const DIRECT_TRAIN: u64 = 3;
    /// Added to the method's position in [`super::Method::ALL`].
    pub const INIT: u64 = 10;
}

const SST_MODALITY: usize = 3;

impl ExperimentConfig {
    /// The 64×64, 60-day desk experiment.
    pub fn desk(seed: u64) -> Self {
        let base = 16;
        let mut synth = SynthConfig::desk(0);
        synth.sigma_sst = 1.0;
        let mut cost = CostConfig::desk(true);
        cost.prior = PhiConfig { base_channels: base, ..PhiConfig::default() };
        // SST relates to SSH through a nonlocal operator; 5×5 features fit it better than 3×3
        for t in cost.terms.iter_mut().filter(|t| t.modality == SST_MODALITY) {
            t.kernel = 5;
        }
        let k = 4;
        let mut train = TrainConfig {
            lr: 3e-3,
            lr_period: 1000,
            unroll: vec![(0, k)],
            epochs: 60,
            patch: Some(32),
            val_every: 5,
            seed: 0,
            ..TrainConfig::desk(0)
        };
        train.weights.w_grad = 10.0;
        let mut cfg = ExperimentConfig {
            seed,
            synth,
            masks: MaskConfig::desk(0),
            split: SplitConfig::desk(),
            oi: OIConfig::desk(),
            cost,
            solver: SolverConfig { hidden_channels: base, ..SolverConfig::lstm(k) },
            train: train.clone(),
            direct: DirectConfig {
                net: PhiConfig { base_channels: base, ..PhiConfig::default() },
                use_sst: true,
                train: TrainConfig { epochs: 60, ..train },
            },
            eval: EvalConfig { methods: Method::ALL.to_vec() },
            out_dir: PathBuf::from("out"),
            gradcheck_width: 2,
        };
        cfg.resolve_seeds().expect("desk seeds are derived");
        cfg
    }

    fn seed_slots(&mut self) -> [(&'static str, &mut u64, u64); 4] {
        let s = self.seed;
        [
            ("synth.seed", &mut self.synth.seed, s.wrapping_add(seeds::SYNTH)),
            ("masks.seed", &mut self.masks.seed, s.wrapping_add(seeds::MASKS)),
            ("train.seed", &mut self.train.seed, s.wrapping_add(seeds::TRAIN)),
            ("direct.train.seed", &mut self.direct.train.seed, s.wrapping_add(seeds::DIRECT_TRAIN)),
        ]
    }

    /// Fills unset section seeds; rejects ones that disagree with `seed`.
    pub fn resolve_seeds(&mut self) -> Result<()> {
        for (name, slot, want) in self.seed_slots() {
            if *slot != 0 && *slot != want {
                return Err(AppError::Config(format!("{name} = {} but the top-level seed implies {want}", *slot)));
            }
            *slot = want;
        }
        Ok(())
    }

    /// Replaces the top-level seed and re-derives every section seed.
    pub fn reseed(&mut self, seed: u64) {
        self.seed = seed;
        for (_, slot, want) in self.seed_slots() {
            *slot = want;
        }
    }

    pub fn init_seed(&self, m: Method) -> u64 {
        let i = Method::ALL.iter().position(|x| *x == m).unwrap() as u64;
        self.seed.wrapping_add(seeds::INIT + i)
    }

    pub fn validate(&self) -> Result<()> {
        let n_t = self.synth.grid.n_t;
        self.synth.validate()?;
        self.masks.validate()?;
        self.split.validate(n_t)?;
        self.oi.validate()?;
        for m in [Method::VarSst, Method::VarSsh, Method::Direct] {
            self.model(m)?.validate()?;
        }
        for (name, t) in [("train", &self.train), ("direct.train", &self.direct.train)] {
            t.validate().map_err(|e| AppError::Config(format!("{name}: {e}")))?;
        }
        let last_k = self.train.unroll.last().map_or(0, |e| e.1);
        if last_k != self.solver.n_iters {
            return Err(AppError::Config(format!(
                "solver.n_iters = {} but the unroll schedule ends at K = {last_k}",
                self.solver.n_iters
            )));
        }
        if !self.cost.terms.iter().any(|t| t.modality == SST_MODALITY) {
            return Err(AppError::Config("cost has no SST term (modality 3)".into()));
        }
        if self.eval.methods.is_empty() {
            return Err(AppError::Config("eval.methods is empty".into()));
        }
        if self.gradcheck_width == 0 {
            return Err(AppError::Config("gradcheck_width must be positive".into()));
        }
        Ok(())
    }

    /// Cost of a variational method.
    pub fn cost_for(&self, m: Method) -> CostConfig {
        let mut c = self.cost.clone();
        if m == Method::VarSsh {
            c.terms.retain(|t| t.modality != SST_MODALITY);
        }
        c
    }

    pub fn model(&self, m: Method) -> Result<ModelSpec> {
        match m {
            Method::VarSst | Method::VarSsh => Ok(ModelSpec::Variational { cost: self.cost_for(m), solver: self.solver.clone() }),
            Method::Direct => Ok(ModelSpec::Direct { net: self.direct.net.clone(), use_sst: self.direct.use_sst }),
            Method::Oi => Err(AppError::Config("oi is not a trainable method".into())),
        }
    }

    pub fn train_config(&self, m: Method) -> &TrainConfig {
        if m == Method::Direct {
            &self.direct.train
        } else {
            &self.train
        }
    }

    /// Feature-pair terms of the SSH+SST cost.
    pub fn feature_terms(&self) -> Vec<varinv_core::obsops::ObsTermSpec> {
        self.cost.terms.iter().filter(|t| t.kind == TermKind::FeaturePair).cloned().collect()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| AppError::Config(e.to_string()))?;
        cfg.resolve_seeds()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| AppError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            AppError::Config(m) => AppError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
