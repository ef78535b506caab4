#![allow(dead_code)]

use std::path::Path;

use varinv::config::ExperimentConfig;
use varinv_core::fields::GridSpec;
use varinv_core::priornet::PhiConfig;

/// Desk layout shrunk to seconds: 16×16 cells, 20 days, 5-day windows.
pub fn small_config(dir: &Path, seed: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig::desk(seed);
    c.synth.grid = GridSpec::new(20, 16, 16, 0.05, 1.0).unwrap();
    c.synth.lambda0 = 6.0 * c.synth.grid.dx;
    c.split.window = 5;
    c.split.val_block = [10, 15];
    c.split.test_block = [15, 20];
    let net = PhiConfig { base_channels: 2, ..PhiConfig::default() };
    c.cost.prior = net.clone();
    for t in &mut c.cost.terms {
        t.channels = 2;
    }
    c.solver.hidden_channels = 2;
    c.solver.n_iters = 2;
    c.train.unroll = vec![(0, 2)];
    c.train.epochs = 2;
    c.train.patch = None;
    c.train.val_every = 1;
    c.direct.net = net;
    c.direct.train.epochs = 2;
    c.direct.train.patch = None;
    c.direct.train.val_every = 1;
    c.out_dir = dir.to_path_buf();
    c.validate().unwrap();
    c
}
