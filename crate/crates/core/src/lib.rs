#![no_std]
extern crate alloc;

pub mod baselines;
pub mod diagnostics;
pub mod error;
pub mod fields;
pub mod gradcore;
pub mod metrics;
pub mod obsops;
pub mod osse;
pub mod priornet;
pub mod solver;
pub mod spectral;
pub mod train;
pub mod varcost;

pub use error::{Error, Result};
